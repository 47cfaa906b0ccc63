use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use repcount::metrics::{mae, obo, periodicity_scores, pr_auc, CountEval, PeriodicityEval, PeriodicityReport, Threshold};
use repcount::{Error, Result};

use crate::io;

const ID_COLUMNS: [&str; 4] = ["video", "video_id", "filename", "name"];

#[derive(clap::Args)]
pub struct CountArgs {
    /// JSON object from video name to a count, or to a `count` output.
    #[arg(long)]
    predictions: PathBuf,
    /// CSV with a video column and a `count` column.
    #[arg(long)]
    ground_truth: PathBuf,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(clap::Args)]
pub struct PeriodicityArgs {
    /// JSON object from video name to per-frame scores, or to a `count` output.
    #[arg(long)]
    predictions: PathBuf,
    /// CSV with columns `video,frame,periodic`.
    #[arg(long)]
    ground_truth: PathBuf,
    /// `best` or a fixed score threshold.
    #[arg(long, default_value = "best")]
    threshold: String,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Serialize)]
pub struct CountReport {
    pub mae: f64,
    pub obo: f64,
    pub num_videos: usize,
}

#[derive(Serialize)]
pub struct PeriodicityOutput {
    #[serde(flatten)]
    pub report: PeriodicityReport,
    /// Absent when no frame is labeled periodic.
    pub pr_auc: Option<f64>,
    pub num_videos: usize,
}

fn read_predictions(path: &Path) -> Result<BTreeMap<String, Value>> {
    let v: Value = serde_json::from_str(&io::read_text(path)?)?;
    match v {
        Value::Object(m) => Ok(m.into_iter().collect()),
        _ => Err(Error::Schema(format!("{}: expected an object keyed by video", path.display()))),
    }
}

fn as_count(name: &str, v: &Value) -> Result<f64> {
    let n = match v {
        Value::Object(m) => m.get("count"),
        other => Some(other),
    };
    n.and_then(Value::as_f64)
        .ok_or_else(|| Error::Schema(format!("prediction for {name} has no numeric count")))
}

fn as_scores(name: &str, v: &Value) -> Result<Vec<f64>> {
    let bad = || Error::Schema(format!("prediction for {name} has no per-frame scores"));
    let list = match v {
        Value::Array(a) => a,
        Value::Object(m) => m.get("per_frame").and_then(Value::as_array).ok_or_else(bad)?,
        _ => return Err(bad()),
    };
    list.iter()
        .map(|x| match x {
            Value::Object(m) => m.get("p").and_then(Value::as_f64),
            other => other.as_f64(),
        })
        .collect::<Option<Vec<f64>>>()
        .ok_or_else(bad)
}

fn csv_reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    if !path.is_file() {
        return Err(Error::NotFound(path.to_path_buf()));
    }
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?)
}

fn column(headers: &csv::StringRecord, names: &[&str], path: &Path) -> Result<usize> {
    headers
        .iter()
        .position(|h| names.contains(&h))
        .ok_or_else(|| Error::Schema(format!("{}: missing column {}", path.display(), names.join("|"))))
}

fn field<'a>(row: &'a csv::StringRecord, i: usize, line: u64) -> Result<&'a str> {
    row.get(i).ok_or_else(|| Error::Schema(format!("line {line}: too few fields")))
}

fn read_count_truth(path: &Path) -> Result<Vec<(String, u32)>> {
    let mut r = csv_reader(path)?;
    let h = r.headers()?.clone();
    let (vid, cnt) = (column(&h, &ID_COLUMNS, path)?, column(&h, &["count"], path)?);
    let mut out = Vec::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let count = field(&row, cnt, line)?
            .parse()
            .map_err(|e| Error::Schema(format!("line {line}: bad count: {e}")))?;
        out.push((field(&row, vid, line)?.to_string(), count));
    }
    Ok(out)
}

fn parse_flag(s: &str, line: u64) -> Result<bool> {
    match s {
        "1" | "true" | "True" => Ok(true),
        "0" | "false" | "False" => Ok(false),
        _ => Err(Error::Schema(format!("line {line}: bad periodic flag {s:?}"))),
    }
}

fn read_periodicity_truth(path: &Path) -> Result<BTreeMap<String, Vec<bool>>> {
    let mut r = csv_reader(path)?;
    let h = r.headers()?.clone();
    let vid = column(&h, &ID_COLUMNS, path)?;
    let (frame, per) = (column(&h, &["frame"], path)?, column(&h, &["periodic"], path)?);
    let mut rows: BTreeMap<String, BTreeMap<usize, bool>> = BTreeMap::new();
    for row in r.records() {
        let row = row?;
        let line = row.position().map_or(0, |p| p.line());
        let f: usize = field(&row, frame, line)?
            .parse()
            .map_err(|e| Error::Schema(format!("line {line}: bad frame index: {e}")))?;
        let p = parse_flag(field(&row, per, line)?, line)?;
        if rows.entry(field(&row, vid, line)?.to_string()).or_default().insert(f, p).is_some() {
            return Err(Error::Schema(format!("line {line}: duplicate frame {f}")));
        }
    }
    rows.into_iter()
        .map(|(name, frames)| {
            if frames.keys().enumerate().any(|(i, &f)| i != f) {
                return Err(Error::Schema(format!("{name}: frame indices are not 0..n")));
            }
            Ok((name, frames.into_values().collect()))
        })
        .collect()
}

fn missing(name: &str) -> Error {
    Error::InvalidInput(format!("no prediction for ground-truth video {name}"))
}

pub fn evaluate_counts(predictions: &Path, truth: &Path) -> Result<CountReport> {
    let preds = read_predictions(predictions)?;
    let evals = read_count_truth(truth)?
        .iter()
        .map(|(name, t)| {
            let p = preds.get(name).ok_or_else(|| missing(name))?;
            CountEval::new(as_count(name, p)?, *t)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountReport {
        mae: mae(&evals)?,
        obo: obo(&evals)?,
        num_videos: evals.len(),
    })
}

pub fn run_count(args: CountArgs) -> Result<()> {
    let report = evaluate_counts(&args.predictions, &args.ground_truth)?;
    io::emit_json(&report, args.out.as_deref())
}

#[derive(Serialize, Deserialize)]
struct PeriodicitySettings {
    threshold: Threshold,
}

pub fn parse_threshold(s: &str) -> Result<Threshold> {
    if s == "best" {
        return Ok(Threshold::BestF1);
    }
    s.parse()
        .ok()
        .filter(|t: &f64| t.is_finite())
        .map(Threshold::Fixed)
        .ok_or_else(|| Error::InvalidConfig(format!("threshold must be `best` or a number, got {s:?}")))
}

pub fn evaluate_periodicity(predictions: &Path, truth: &Path, threshold: Threshold) -> Result<PeriodicityOutput> {
    let preds = read_predictions(predictions)?;
    let evals = read_periodicity_truth(truth)?
        .into_iter()
        .map(|(name, t)| {
            let p = preds.get(&name).ok_or_else(|| missing(&name))?;
            PeriodicityEval::new(as_scores(&name, p)?, t)
        })
        .collect::<Result<Vec<_>>>()?;
    let report = periodicity_scores(&evals, threshold)?;
    let auc = match pr_auc(&evals) {
        Ok(a) => Some(a),
        Err(Error::Undefined(why)) => {
            log::warn!("PR-AUC undefined: {why}");
            None
        }
        Err(e) => return Err(e),
    };
    Ok(PeriodicityOutput {
        report,
        pr_auc: auc,
        num_videos: evals.len(),
    })
}

pub fn run_periodicity(args: PeriodicityArgs) -> Result<()> {
    let threshold = parse_threshold(&args.threshold)?;
    io::log_config("eval-periodicity", &PeriodicitySettings { threshold });
    let out = evaluate_periodicity(&args.predictions, &args.ground_truth, threshold)?;
    io::emit_json(&out, args.out.as_deref())
}
