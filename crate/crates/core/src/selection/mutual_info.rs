use super::{FeatureTable, Ranking};
use crate::error::Result;

pub const MI_BINS: usize = 10;

/// Equal-frequency bin of each value. Equal values always share a bin, so a
/// constant input lands entirely in bin 0.
pub fn equal_frequency_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let n = values.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut out = vec![0; n];
    let mut prev: Option<(f64, usize)> = None;
    for (pos, &i) in order.iter().enumerate() {
        let bin = match prev {
            Some((v, b)) if v == values[i] => b,
            _ => pos * bins / n,
        };
        out[i] = bin;
        prev = Some((values[i], bin));
    }
    out
}

/// Plug-in mutual information (bits) between a binned feature and a binary label.
pub fn mutual_information_bits(feature: &[f64], labels: &[bool]) -> f64 {
    let n = feature.len();
    if n == 0 {
        return 0.0;
    }
    let bins = equal_frequency_bins(feature, MI_BINS);
    let mut joint = [[0usize; 2]; MI_BINS];
    for (&b, &l) in bins.iter().zip(labels) {
        joint[b][usize::from(l)] += 1;
    }
    let nf = n as f64;
    let label_counts = [
        labels.iter().filter(|&&l| !l).count() as f64,
        labels.iter().filter(|&&l| l).count() as f64,
    ];
    let mut mi = 0.0;
    for row in &joint {
        let bin_count = (row[0] + row[1]) as f64;
        for (y, &c) in row.iter().enumerate() {
            if c == 0 {
                continue;
            }
            let pxy = c as f64 / nf;
            mi += pxy * (c as f64 * nf / (bin_count * label_counts[y])).ln();
        }
    }
    (mi / std::f64::consts::LN_2).max(0.0)
}

pub fn rank_by_mutual_info(table: &FeatureTable) -> Result<Ranking> {
    table.require_both_labels()?;
    let scores = (0..table.n_features())
        .map(|n| mutual_information_bits(&table.column(n), &table.labels))
        .collect();
    Ok(Ranking::from_scores(scores))
}
