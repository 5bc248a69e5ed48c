//! Straight-line reimplementation of the 62 indicators used as a test oracle.
//! Deliberately shares no code with the library.

use dfbscan::FinalLayerParams;

fn w(p: &FinalLayerParams, i: usize, j: usize) -> f64 {
    f64::from(p.weights()[i * p.d() + j])
}

fn minmax(v: &[f64]) -> Vec<f64> {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

fn avg(v: &[f64]) -> f64 {
    let mut s = 0.0;
    for x in v {
        s += x;
    }
    s / v.len() as f64
}

fn pstd(v: &[f64]) -> f64 {
    let m = avg(v);
    let mut s = 0.0;
    for x in v {
        s += (x - m) * (x - m);
    }
    (s / v.len() as f64).sqrt()
}

fn zscore(v: &[f64]) -> Vec<f64> {
    let m = avg(v);
    let s = pstd(v);
    if s == 0.0 {
        return vec![0.0; v.len()];
    }
    v.iter().map(|x| (x - m) / s).collect()
}

fn linear_quantile(v: &[f64], q: f64) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (s.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    s[lo] + (s[hi] - s[lo]) * (pos - lo as f64)
}

/// Raw values of the 13 major indicators in catalog order.
pub fn majors(p: &FinalLayerParams) -> Vec<Vec<f64>> {
    let (k, d) = (p.k(), p.d());
    let b: Vec<f64> = p.bias().iter().map(|&x| f64::from(x)).collect();
    let mut wm = vec![0.0; k];
    let mut vw = vec![0.0; k];
    let mut l1 = vec![0.0; k];
    let mut l2 = vec![0.0; k];
    let mut sq = vec![0.0; k];
    let mut sum = vec![0.0; k];
    for i in 0..k {
        for j in 0..d {
            sum[i] += w(p, i, j);
            l1[i] += w(p, i, j).abs();
            sq[i] += w(p, i, j) * w(p, i, j);
        }
        wm[i] = sum[i] / d as f64;
        for j in 0..d {
            vw[i] += (w(p, i, j) - wm[i]).powi(2);
        }
        vw[i] /= d as f64;
        l1[i] /= d as f64;
        l2[i] = sq[i].sqrt();
    }
    let awm: Vec<f64> = wm.iter().map(|x| x.abs()).collect();
    let svw: Vec<f64> = vw.iter().map(|x| x.sqrt()).collect();

    let msq: Vec<f64> = sq.iter().map(|x| x / d as f64).collect();
    let top = msq.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = msq.iter().map(|x| (x - top).exp()).collect();
    let total: f64 = exps.iter().sum();
    let we: Vec<f64> = exps.iter().map(|e| e / total).collect();

    let swb: Vec<f64> = (0..k).map(|i| b[i] + sum[i]).collect();
    let awb: Vec<f64> = minmax(&wm)
        .iter()
        .zip(minmax(&b))
        .map(|(a, c)| a + c)
        .collect();

    let mut ws = vec![0.0; k];
    for i in 0..k {
        for jj in 0..k {
            if jj == i {
                continue;
            }
            let mut dot = 0.0;
            for j in 0..d {
                dot += w(p, i, j) * w(p, jj, j);
            }
            let cos = if l2[i] == 0.0 || l2[jj] == 0.0 {
                0.0
            } else {
                (dot / (l2[i] * l2[jj])).clamp(-1.0, 1.0)
            };
            ws[i] += 1.0 - cos;
        }
        ws[i] /= k as f64;
    }

    let eu: Vec<f64> = (0..k)
        .map(|i| {
            let den = k as f64 + sum[i];
            let den = if den.abs() < 1e-6 {
                1e-6f64.copysign(den)
            } else {
                den
            };
            k as f64 / den
        })
        .collect();
    let wc: Vec<f64> = minmax(&eu).iter().map(|x| 1.0 - x).collect();

    let wbz: Vec<f64> = minmax(&zscore(&wm))
        .iter()
        .zip(minmax(&zscore(&b)))
        .map(|(a, c)| a + c)
        .collect();

    vec![wm, awm, vw, svw, l1, l2, we, b, swb, awb, ws, wc, wbz]
}

/// Applies a form by code: 0 RAW, 1 ZS, 2 NAD, 3 IQU, 4 IQL.
pub fn form(v: &[f64], code: usize) -> Vec<f64> {
    let m = avg(v);
    match code {
        0 => v.to_vec(),
        1 => zscore(v),
        2 => {
            let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi == lo {
                vec![0.0; v.len()]
            } else {
                v.iter().map(|x| (x - m).abs() / (hi - lo)).collect()
            }
        }
        3 | 4 => {
            let q1 = linear_quantile(v, 0.25);
            let q3 = linear_quantile(v, 0.75);
            let iqr = q3 - q1;
            if code == 3 {
                v.iter().map(|x| x - (q3 + 1.5 * iqr)).collect()
            } else {
                v.iter().map(|x| (q1 - 1.5 * iqr) - x).collect()
            }
        }
        _ => unreachable!(),
    }
}

/// All 62 raw columns in catalog order.
pub fn raw_columns(p: &FinalLayerParams) -> Vec<Vec<f64>> {
    let m = majors(p);
    let mut out = Vec::with_capacity(62);
    for major in m.iter().take(12) {
        for code in 0..5 {
            out.push(form(major, code));
        }
    }
    out.push(form(&m[12], 0));
    out.push(form(&m[12], 2));
    out
}

pub fn normalized(column: &[f64]) -> Vec<f64> {
    let lo = column.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = column.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if hi == lo {
        return vec![0.5; column.len()];
    }
    column.iter().map(|x| (x - lo) / (hi - lo)).collect()
}

/// Largest entrywise deviation relative to the column's magnitude.
pub fn column_error(got: &[f64], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |a, x| a.max(x.abs())).max(1e-12);
    got.iter()
        .zip(want)
        .map(|(g, w)| (g - w).abs() / scale)
        .fold(0.0, f64::max)
}
