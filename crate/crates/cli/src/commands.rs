use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use dfbscan::calibration::{list_model_files, read_labels_file, ConfigSet, LABELS_FILE};
use dfbscan::detector::{anomaly_score, detect, reference_free_from_scores, ReportRecord};
use dfbscan::indicators::{indicator_catalog, INDICATOR_COUNT};
use dfbscan::selection::{select, SelectOptions};
use dfbscan::synth::{generate_models, write_models, SynthSpec, TargetPolicy};
use dfbscan::{
    build_profile, compute_indicator_matrix, load_final_layer, stats, ClueProfile, LayerFormat,
};
use rayon::prelude::*;
use serde::Serialize;

use crate::args::{
    CalibrateArgs, Cli, Command, ConfigDirs, DumpArgs, GenerateArgs, GlobalOpts, IndicatorsCommand,
    OutputFormat, ScanArgs, ScanBatchArgs, SelectArgs, SynthCommand, TargetArg,
};
use crate::failure::{data, Failure, EXIT_BACKDOORED, EXIT_CLEAN};
use crate::render;

/// Rendered output plus the exit status it implies.
pub struct Outcome {
    pub text: String,
    pub exit: u8,
}

impl Outcome {
    fn clean(text: String) -> Self {
        Self {
            text,
            exit: EXIT_CLEAN,
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome, Failure> {
    check_output(&cli.global)?;
    let g = &cli.global;
    match &cli.command {
        Command::Scan(a) => scan(a, g),
        Command::ScanBatch(a) => scan_batch(a, g),
        Command::Calibrate(a) => calibrate(a, g),
        Command::Select(a) => select_cmd(a, g),
        Command::Synth(SynthCommand::Generate(a)) => generate(a, g),
        Command::Indicators(IndicatorsCommand::Dump(a)) => dump(a, g),
    }
}

fn check_output(g: &GlobalOpts) -> Result<(), Failure> {
    let Some(out) = &g.output else { return Ok(()) };
    match out.parent() {
        Some(dir) if !dir.as_os_str().is_empty() && !dir.is_dir() => Err(Failure::Usage(format!(
            "output directory {} does not exist",
            dir.display()
        ))),
        _ if out.is_dir() => Err(Failure::Usage(format!(
            "output {} is a directory",
            out.display()
        ))),
        _ => Ok(()),
    }
}

fn require_file(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} {} not found",
            path.display()
        )))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<(), Failure> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Failure::Usage(format!(
            "{what} directory {} not found",
            path.display()
        )))
    }
}

fn no_csv(g: &GlobalOpts, command: &str) -> Result<(), Failure> {
    if g.format == OutputFormat::Csv {
        return Err(Failure::Usage(format!(
            "--format csv is not available for {command}"
        )));
    }
    Ok(())
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("report serializes")
}

fn elapsed_us(d: Duration) -> u64 {
    d.as_micros() as u64
}

fn scan(args: &ScanArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    require_file(&args.profile, "profile")?;
    require_file(&args.model, "model")?;
    let profile = ClueProfile::load(&args.profile).map_err(|e| data(args.profile.display(), e))?;
    let params = load_final_layer(&args.model, args.layer_format)
        .map_err(|e| data(args.model.display(), e))?;
    let report = detect(&params, &profile).map_err(|e| data(args.model.display(), e))?;
    let record = ReportRecord::new(
        &args.model.display().to_string(),
        &report,
        profile.lambda(),
        !g.no_timing,
    );
    let text = match g.format {
        OutputFormat::Json => to_json(&record),
        OutputFormat::Csv => render::scan_csv(&record),
        OutputFormat::Human => render::scan_human(&record),
    };
    let exit = if record.is_backdoored {
        EXIT_BACKDOORED
    } else {
        EXIT_CLEAN
    };
    Ok(Outcome { text, exit })
}

/// One model of a batch scan. Fields that do not apply are omitted.
#[derive(Debug, Default, Serialize)]
pub struct BatchRow {
    pub path: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub is_backdoored: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_similarity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_score: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub target_class: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_us: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Serialize)]
pub struct BatchSummary {
    pub mode: &'static str,
    pub total: usize,
    pub scanned: usize,
    pub flagged: usize,
    pub errors: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub lambda: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub z_threshold: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub elapsed_ms: Option<f64>,
}

#[derive(Debug, Serialize)]
pub struct BatchReport {
    pub summary: BatchSummary,
    pub rows: Vec<BatchRow>,
}

fn scan_batch(args: &ScanBatchArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    require_dir(&args.dir, "model")?;
    let profile = match &args.profile {
        Some(p) => {
            require_file(p, "profile")?;
            Some(ClueProfile::load(p).map_err(|e| data(p.display(), e))?)
        }
        None => None,
    };
    let files = list_model_files(&args.dir).map_err(|e| data(args.dir.display(), e))?;
    let required = if profile.is_some() { 1 } else { 3 };
    if files.len() < required {
        return Err(Failure::Usage(format!(
            "{} holds {} model files, at least {required} required",
            args.dir.display(),
            files.len()
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(args.threads)
        .build()
        .map_err(|e| {
            Failure::Usage(format!("cannot start {} worker threads: {e}", args.threads))
        })?;

    let start = Instant::now();
    let (rows, mut summary) = pool.install(|| match &profile {
        Some(profile) => Ok(batch_with_profile(&files, profile, g)),
        None => batch_reference_free(&files, args, g),
    })?;
    summary.elapsed_ms = (!g.no_timing).then(|| start.elapsed().as_secs_f64() * 1e3);

    for row in &rows {
        if let Some(e) = &row.error {
            eprintln!("dfbscan: {}: {e}", row.path);
        }
    }
    if g.verbose > 0 {
        eprintln!(
            "dfbscan: {} scanned, {} flagged, {} errors in {:.1} ms",
            summary.scanned,
            summary.flagged,
            summary.errors,
            start.elapsed().as_secs_f64() * 1e3
        );
    }
    if summary.scanned == 0 {
        return Err(Failure::Data(format!(
            "all {} models failed",
            summary.total
        )));
    }
    let exit = if summary.flagged > 0 {
        EXIT_BACKDOORED
    } else {
        EXIT_CLEAN
    };
    let report = BatchReport { summary, rows };
    let text = match g.format {
        OutputFormat::Json => to_json(&report),
        OutputFormat::Csv => render::batch_csv(&report.rows, !g.no_timing),
        OutputFormat::Human => render::batch_human(&report),
    };
    Ok(Outcome { text, exit })
}

fn error_row(path: &Path, message: String) -> BatchRow {
    BatchRow {
        path: path.display().to_string(),
        error: Some(message),
        ..Default::default()
    }
}

fn batch_with_profile(
    files: &[PathBuf],
    profile: &ClueProfile,
    g: &GlobalOpts,
) -> (Vec<BatchRow>, BatchSummary) {
    let rows: Vec<BatchRow> = files
        .par_iter()
        .map(|path| {
            let report =
                load_final_layer(path, LayerFormat::Auto).and_then(|p| detect(&p, profile));
            match report {
                Ok(r) => BatchRow {
                    path: path.display().to_string(),
                    is_backdoored: Some(r.is_backdoored),
                    similarity: Some(r.similarity),
                    target_class: r.target_class,
                    elapsed_us: (!g.no_timing).then(|| elapsed_us(r.elapsed)),
                    ..Default::default()
                },
                Err(e) => error_row(path, e.to_string()),
            }
        })
        .collect();
    let summary = summarize(&rows, "profile", Some(profile.lambda()), None);
    (rows, summary)
}

/// Class count, anomaly score and scoring time of one model.
type ScoredModel = (usize, Vec<f64>, Duration);

fn batch_reference_free(
    files: &[PathBuf],
    args: &ScanBatchArgs,
    g: &GlobalOpts,
) -> Result<(Vec<BatchRow>, BatchSummary), Failure> {
    let ids: Vec<usize> = if args.indicators.is_empty() {
        (0..INDICATOR_COUNT).collect()
    } else {
        args.indicators.clone()
    };
    let scored: Vec<Result<ScoredModel, String>> = files
        .par_iter()
        .map(|path| {
            let params = load_final_layer(path, LayerFormat::Auto).map_err(|e| e.to_string())?;
            let start = Instant::now();
            let score = anomaly_score(&compute_indicator_matrix(&params), &ids)
                .map_err(|e| e.to_string())?;
            Ok((params.k(), score, start.elapsed()))
        })
        .collect();
    let k = scored
        .iter()
        .find_map(|r| r.as_ref().ok().map(|(k, _, _)| *k));

    let mut rows = Vec::with_capacity(files.len());
    let mut valid = Vec::new();
    for (path, result) in files.iter().zip(scored) {
        match result {
            Ok((kk, score, elapsed)) if Some(kk) == k => {
                valid.push((rows.len(), score));
                rows.push(BatchRow {
                    path: path.display().to_string(),
                    elapsed_us: (!g.no_timing).then(|| elapsed_us(elapsed)),
                    ..Default::default()
                });
            }
            Ok((kk, _, _)) => rows.push(error_row(
                path,
                format!(
                    "class count mismatch: batch has K = {}, model has K = {kk}",
                    k.unwrap_or(0)
                ),
            )),
            Err(e) => rows.push(error_row(path, e)),
        }
    }
    if valid.is_empty() {
        return Err(Failure::Data(format!("all {} models failed", files.len())));
    }
    if valid.len() < 3 {
        return Err(Failure::Data(format!(
            "only {} models loaded, reference-free scanning needs at least 3",
            valid.len()
        )));
    }
    let scores: Vec<Vec<f64>> = valid.iter().map(|(_, s)| s.clone()).collect();
    for ((row_index, score), rf) in valid
        .iter()
        .zip(reference_free_from_scores(&scores, args.z_threshold))
    {
        let row = &mut rows[*row_index];
        row.is_backdoored = Some(rf.flagged);
        row.mean_similarity = Some(rf.mean_similarity);
        row.z_score = Some(rf.z_score);
        row.target_class = rf.flagged.then(|| stats::argmax(score));
    }
    let summary = summarize(&rows, "reference-free", None, Some(args.z_threshold));
    Ok((rows, summary))
}

fn summarize(
    rows: &[BatchRow],
    mode: &'static str,
    lambda: Option<f64>,
    z_threshold: Option<f64>,
) -> BatchSummary {
    let errors = rows.iter().filter(|r| r.error.is_some()).count();
    BatchSummary {
        mode,
        total: rows.len(),
        scanned: rows.len() - errors,
        flagged: rows
            .iter()
            .filter(|r| r.is_backdoored == Some(true))
            .count(),
        errors,
        lambda,
        z_threshold,
        elapsed_ms: None,
    }
}

fn load_config(dirs: &ConfigDirs) -> Result<ConfigSet, Failure> {
    require_dir(&dirs.clean, "clean")?;
    require_dir(&dirs.backdoor, "backdoor")?;
    require_file(&dirs.backdoor.join(LABELS_FILE), "backdoor labels file")?;
    let has_clean_models = dirs.clean.join(LABELS_FILE).is_file()
        || !list_model_files(&dirs.clean)
            .map_err(|e| data(dirs.clean.display(), e))?
            .is_empty();
    if !has_clean_models {
        return Err(Failure::Usage(format!(
            "clean directory {} holds no model files",
            dirs.clean.display()
        )));
    }
    let labels = read_labels_file(&dirs.backdoor).map_err(|e| data(dirs.backdoor.display(), e))?;
    if labels.is_empty() {
        return Err(Failure::Usage(format!(
            "backdoor labels in {} list no models",
            dirs.backdoor.display()
        )));
    }
    ConfigSet::from_dirs(&dirs.clean, &dirs.backdoor).map_err(Failure::from)
}

fn calibrate(args: &CalibrateArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    no_csv(g, "calibrate")?;
    let config = load_config(&args.dirs)?;
    let ids: Vec<usize> = if args.indicators.is_empty() {
        (0..INDICATOR_COUNT).collect()
    } else {
        args.indicators.clone()
    };
    let profile = build_profile(&config, &ids)?;
    let text = match g.format {
        OutputFormat::Human => render::profile_human(&profile),
        _ => profile.to_json(),
    };
    Ok(Outcome::clean(text))
}

#[derive(Serialize)]
struct SelectReport {
    result: dfbscan::SelectionResult,
    profile: ClueProfile,
}

fn select_cmd(args: &SelectArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    no_csv(g, "select")?;
    if let Some(p) = &args.profile_out {
        check_output(&GlobalOpts {
            output: Some(p.clone()),
            ..*g
        })?;
    }
    let config = load_config(&args.dirs)?;
    let opts = SelectOptions {
        method: args.method,
        n: args.n,
        seed: args.seed,
    };
    let (result, profile) = select(&config, opts).map_err(|e| match e {
        dfbscan::Error::InvalidSpec(m) => Failure::Usage(m),
        e => Failure::from(e),
    })?;
    if let Some(p) = &args.profile_out {
        profile.save(p).map_err(|e| data(p.display(), e))?;
    }
    let text = match g.format {
        OutputFormat::Human => render::selection_human(&result, &profile),
        _ => to_json(&SelectReport { result, profile }),
    };
    Ok(Outcome::clean(text))
}

#[derive(Serialize)]
struct GenerateReport {
    out: String,
    k: usize,
    d: usize,
    count: usize,
    attack: String,
    strength: f64,
    seed: u64,
    labels: String,
    models: Vec<GeneratedModel>,
}

#[derive(Serialize)]
pub struct GeneratedModel {
    pub file: String,
    pub target: Option<usize>,
}

fn generate(args: &GenerateArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    if args.count == 0 {
        return Err(Failure::Usage("--count must be at least 1".into()));
    }
    let target = match args.target {
        TargetArg::Index(t) => t,
        TargetArg::Cycle => 0,
    };
    let mut spec = SynthSpec::new(args.k, args.d).with_attack(args.attack, args.strength, target);
    if args.weight_scale.is_some() || args.bias_scale.is_some() {
        spec = spec.clone().with_scales(
            args.weight_scale.unwrap_or(spec.weight_scale),
            args.bias_scale.unwrap_or(spec.bias_scale),
        );
    }
    spec.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let policy = match args.target {
        TargetArg::Index(_) => TargetPolicy::Fixed,
        TargetArg::Cycle => TargetPolicy::Cycle { offset: 0 },
    };
    let models = generate_models(&spec, args.count, policy, args.seed, 0)?;
    let paths = write_models(&args.out, &models).map_err(|e| data(args.out.display(), e))?;
    let report = GenerateReport {
        out: args.out.display().to_string(),
        k: args.k,
        d: args.d,
        count: models.len(),
        attack: args.attack.to_string(),
        strength: args.strength,
        seed: args.seed,
        labels: LABELS_FILE.into(),
        models: paths
            .iter()
            .zip(&models)
            .map(|(p, m)| GeneratedModel {
                file: p
                    .file_name()
                    .unwrap_or_default()
                    .to_string_lossy()
                    .into_owned(),
                target: m.target,
            })
            .collect(),
    };
    let text = match g.format {
        OutputFormat::Json => to_json(&report),
        OutputFormat::Csv => render::generated_csv(&report.models),
        OutputFormat::Human => format!(
            "wrote {} {} models (k = {}, d = {}) to {}\n",
            report.count, report.attack, report.k, report.d, report.out
        ),
    };
    Ok(Outcome::clean(text))
}

#[derive(Serialize)]
struct DumpReport {
    k: usize,
    d: usize,
    indicators: Vec<String>,
    raw: Vec<Vec<f64>>,
    normalized: Vec<Vec<f64>>,
}

fn dump(args: &DumpArgs, g: &GlobalOpts) -> Result<Outcome, Failure> {
    require_file(&args.model, "model")?;
    let params = load_final_layer(&args.model, args.layer_format)
        .map_err(|e| data(args.model.display(), e))?;
    let matrix = compute_indicator_matrix(&params);
    let names: Vec<String> = indicator_catalog().into_iter().map(|c| c.name).collect();
    let rows = if args.normalized {
        matrix.normalized_rows()
    } else {
        matrix.raw_rows()
    };
    let text = match g.format {
        OutputFormat::Json => to_json(&DumpReport {
            k: params.k(),
            d: params.d(),
            indicators: names,
            raw: matrix.raw_rows(),
            normalized: matrix.normalized_rows(),
        }),
        OutputFormat::Csv => render::matrix_csv(&names, &rows),
        OutputFormat::Human => render::matrix_human(&names, &rows),
    };
    Ok(Outcome::clean(text))
}
