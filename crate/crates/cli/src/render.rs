//! CSV and human-readable renderings. JSON goes straight through serde.

use std::fmt::Write as _;

use dfbscan::detector::ReportRecord;
use dfbscan::indicators::IndicatorId;
use dfbscan::{ClueProfile, SelectionResult};

use crate::commands::{BatchReport, BatchRow};

fn csv_text(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory csv");
    for row in rows {
        w.write_record(&row).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv is utf-8")
}

fn opt<T: ToString>(v: Option<T>) -> String {
    v.map(|v| v.to_string()).unwrap_or_default()
}

fn name(index: usize) -> String {
    IndicatorId::from_index(index).map_or_else(|| index.to_string(), |id| id.to_string())
}

pub fn scan_csv(r: &ReportRecord) -> String {
    let mut header = vec![
        "path",
        "is_backdoored",
        "similarity",
        "lambda",
        "target_class",
    ];
    let mut row = vec![
        r.path.clone(),
        r.is_backdoored.to_string(),
        r.similarity.to_string(),
        r.lambda.to_string(),
        opt(r.target_class),
    ];
    if let Some(us) = r.elapsed_us {
        header.push("elapsed_us");
        row.push(us.to_string());
    }
    csv_text(&header, [row])
}

pub fn scan_human(r: &ReportRecord) -> String {
    let mut s = match (r.is_backdoored, r.target_class) {
        (true, Some(t)) => format!(
            "{}: BACKDOORED, target class {t} (similarity {:.6} < lambda {:.6})\n",
            r.path, r.similarity, r.lambda
        ),
        _ => format!(
            "{}: clean (similarity {:.6} >= lambda {:.6})\n",
            r.path, r.similarity, r.lambda
        ),
    };
    if let Some(us) = r.elapsed_us {
        let _ = writeln!(s, "detect time: {us} us");
    }
    if let Some(note) = r.profile_meta.get(dfbscan::detector::DEGENERATE_META_KEY) {
        let _ = writeln!(s, "warning: {note}");
    }
    s
}

pub fn batch_csv(rows: &[BatchRow], timing: bool) -> String {
    let mut header = vec![
        "path",
        "is_backdoored",
        "similarity",
        "mean_similarity",
        "z_score",
        "target_class",
    ];
    if timing {
        header.push("elapsed_us");
    }
    header.push("error");
    csv_text(
        &header,
        rows.iter().map(|r| {
            let mut row = vec![
                r.path.clone(),
                opt(r.is_backdoored),
                opt(r.similarity),
                opt(r.mean_similarity),
                opt(r.z_score),
                opt(r.target_class),
            ];
            if timing {
                row.push(opt(r.elapsed_us));
            }
            row.push(r.error.clone().unwrap_or_default());
            row
        }),
    )
}

pub fn batch_human(report: &BatchReport) -> String {
    let mut s = String::new();
    for r in &report.rows {
        let verdict = match (&r.error, r.is_backdoored) {
            (Some(e), _) => format!("ERROR {e}"),
            (None, Some(true)) => format!("BACKDOORED target {}", opt(r.target_class)),
            _ => "clean".to_string(),
        };
        let measure = match (r.similarity, r.z_score) {
            (Some(sim), _) => format!("sim {sim:.6}"),
            (None, Some(z)) => format!("z {z:+.3}"),
            _ => String::new(),
        };
        let _ = writeln!(s, "{:<48} {:<14} {verdict}", r.path, measure);
    }
    let m = &report.summary;
    let _ = writeln!(
        s,
        "{} models, {} scanned, {} flagged, {} errors ({})",
        m.total, m.scanned, m.flagged, m.errors, m.mode
    );
    s
}

pub fn profile_human(p: &ClueProfile) -> String {
    let names: Vec<String> = p.indicator_ids().iter().map(|&i| name(i)).collect();
    let mut s = format!(
        "k = {}, lambda = {:.6}, {} indicators\n",
        p.k(),
        p.lambda(),
        names.len()
    );
    let _ = writeln!(s, "indicators: {}", names.join(", "));
    for (k, v) in p.meta() {
        let _ = writeln!(s, "{k}: {v}");
    }
    s
}

pub fn selection_human(r: &SelectionResult, p: &ClueProfile) -> String {
    let chosen: Vec<String> = r.chosen.iter().map(|&i| name(i)).collect();
    let mut s = format!(
        "method {}: N = {}, F1 = {:.4}, lambda = {:.6}\n",
        r.method, r.n, r.f1, r.lambda
    );
    let _ = writeln!(s, "chosen: {}", chosen.join(", "));
    for note in &r.notes {
        let _ = writeln!(s, "note: {note}");
    }
    let _ = writeln!(s, "profile k = {}", p.k());
    s
}

pub fn generated_csv(models: &[crate::commands::GeneratedModel]) -> String {
    csv_text(
        &["path", "target"],
        models.iter().map(|m| vec![m.file.clone(), opt(m.target)]),
    )
}

pub fn matrix_csv(names: &[String], rows: &[Vec<f64>]) -> String {
    let header: Vec<&str> = names.iter().map(String::as_str).collect();
    csv_text(
        &header,
        rows.iter().map(|r| r.iter().map(f64::to_string).collect()),
    )
}

pub fn matrix_human(names: &[String], rows: &[Vec<f64>]) -> String {
    let mut s = String::new();
    for (j, name) in names.iter().enumerate() {
        let values: Vec<String> = rows.iter().map(|r| format!("{:>12.6}", r[j])).collect();
        let _ = writeln!(s, "{name:<8}{}", values.join(""));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_quotes_commas() {
        let text = csv_text(&["a", "b"], [vec!["x,y".into(), "2".into()]]);
        assert_eq!(text, "a,b\n\"x,y\",2\n");
    }

    #[test]
    fn matrix_rows_round_trip() {
        let text = matrix_csv(
            &["A".into(), "B".into()],
            &[vec![0.5, -1.25], vec![3.0, 1e-9]],
        );
        assert_eq!(text, "A,B\n0.5,-1.25\n3,0.000000001\n");
    }
}
