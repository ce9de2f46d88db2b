//! CSV and JSON reading/writing for every artifact format.
//!
//! Ingestion is strict: headers must match the declared column names, every
//! numeric field must parse as a finite `f64` with a `.` decimal separator,
//! and malformed rows are reported with their path and line number. Writers
//! are deterministic: subjects keep dataset order, everything keyed by name
//! is emitted in sorted order, and floats print in shortest round-trip form,
//! so identical inputs always produce byte-identical files.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::Array2;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::evaluate::MetricReport;
use crate::jive::{JiveDecomposition, ScoreCorrelation};
use crate::lmoments::LMomentVector;
use crate::quantiles::{QuantileFunction, RepeatedMeasuresDataset, SubjectRecord};
use crate::soqfr::FunctionalCoefficient;

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.display().to_string(), source }
}

fn parse_error(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { path: path.display().to_string(), line, message: message.into() }
}

fn open_csv(path: &Path) -> Result<csv::Reader<BufReader<File>>> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(BufReader::new(file)))
}

fn record_line(record: &csv::StringRecord) -> u64 {
    record.position().map(|p| p.line()).unwrap_or(0)
}

fn check_width(path: &Path, record: &csv::StringRecord, expected: usize) -> Result<()> {
    if record.len() != expected {
        return Err(parse_error(
            path,
            record_line(record),
            format!("expected {expected} fields, found {}", record.len()),
        ));
    }
    Ok(())
}

fn parse_finite(path: &Path, line: u64, field: &str, what: &str) -> Result<f64> {
    let value: f64 = field
        .parse()
        .map_err(|_| parse_error(path, line, format!("{what} `{field}` is not a number")))?;
    if !value.is_finite() {
        return Err(parse_error(path, line, format!("{what} `{field}` is not finite")));
    }
    Ok(value)
}

fn expect_header(path: &Path, reader: &mut csv::Reader<BufReader<File>>, expected: &[&str]) -> Result<()> {
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?;
    let got: Vec<&str> = headers.iter().collect();
    if got != expected {
        return Err(parse_error(
            path,
            1,
            format!("expected header `{}`, found `{}`", expected.join(","), got.join(",")),
        ));
    }
    Ok(())
}

/// Read the subjects table: `subject_id,outcome,<covariates...>`. Covariate
/// names are everything after the two fixed columns, in file order.
fn read_subjects(path: &Path) -> Result<(Vec<SubjectRecord>, Vec<String>)> {
    let mut reader = open_csv(path)?;
    let headers = reader.headers().map_err(|e| parse_error(path, 1, e.to_string()))?.clone();
    let fields: Vec<&str> = headers.iter().collect();
    if fields.len() < 2 || fields[0] != "subject_id" || fields[1] != "outcome" {
        return Err(parse_error(
            path,
            1,
            format!(
                "expected header `subject_id,outcome,<covariates...>`, found `{}`",
                fields.join(",")
            ),
        ));
    }
    let covariate_names: Vec<String> = fields[2..].iter().map(|s| s.to_string()).collect();
    let mut seen_names = std::collections::BTreeSet::new();
    for name in &covariate_names {
        if name.is_empty() || !seen_names.insert(name.clone()) {
            return Err(parse_error(path, 1, format!("covariate name `{name}` is empty or repeated")));
        }
    }

    let mut subjects = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = record_line(&record);
        check_width(path, &record, 2 + covariate_names.len())?;
        let subject_id = record[0].to_string();
        if subject_id.is_empty() {
            return Err(parse_error(path, line, "empty subject_id"));
        }
        if !seen.insert(subject_id.clone()) {
            return Err(parse_error(path, line, format!("duplicate subject_id `{subject_id}`")));
        }
        let outcome = parse_finite(path, line, &record[1], "outcome")?;
        let covariates = record
            .iter()
            .skip(2)
            .map(|f| parse_finite(path, line, f, "covariate"))
            .collect::<Result<Vec<f64>>>()?;
        subjects.push(SubjectRecord {
            subject_id,
            outcome,
            covariates,
            observations: BTreeMap::new(),
        });
    }
    if subjects.is_empty() {
        return Err(parse_error(path, 1, "subjects file has no data rows"));
    }
    Ok((subjects, covariate_names))
}

/// Read the long-format observations table `subject_id,feature_id,value`
/// into the matching subjects, preserving row order within each series.
fn read_observations_into(path: &Path, subjects: &mut [SubjectRecord]) -> Result<()> {
    let mut reader = open_csv(path)?;
    expect_header(path, &mut reader, &["subject_id", "feature_id", "value"])?;
    let index: BTreeMap<String, usize> = subjects
        .iter()
        .enumerate()
        .map(|(i, s)| (s.subject_id.clone(), i))
        .collect();
    let mut any = false;
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = record_line(&record);
        check_width(path, &record, 3)?;
        let subject = &record[0];
        let feature = &record[1];
        if feature.is_empty() {
            return Err(parse_error(path, line, "empty feature_id"));
        }
        let value = parse_finite(path, line, &record[2], "value")?;
        let &i = index.get(subject).ok_or_else(|| {
            parse_error(path, line, format!("subject_id `{subject}` is not in the subjects file"))
        })?;
        subjects[i].observations.entry(feature.to_string()).or_default().push(value);
        any = true;
    }
    if !any {
        return Err(parse_error(path, 1, "observations file has no data rows"));
    }
    Ok(())
}

/// Read the optional `feature_id,domain` mapping.
fn read_domains(path: &Path) -> Result<BTreeMap<String, String>> {
    let mut reader = open_csv(path)?;
    expect_header(path, &mut reader, &["feature_id", "domain"])?;
    let mut domains = BTreeMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| parse_error(path, 0, e.to_string()))?;
        let line = record_line(&record);
        check_width(path, &record, 2)?;
        let feature = record[0].to_string();
        let domain = record[1].to_string();
        if feature.is_empty() || domain.is_empty() {
            return Err(parse_error(path, line, "empty feature_id or domain"));
        }
        if domains.insert(feature.clone(), domain).is_some() {
            return Err(parse_error(path, line, format!("feature `{feature}` mapped twice")));
        }
    }
    Ok(domains)
}

/// Assemble a dataset from its three files (domains optional). Subjects keep
/// the order of the subjects file; the result is fully validated.
pub fn read_dataset(
    observations: &Path,
    subjects: &Path,
    domains: Option<&Path>,
) -> Result<RepeatedMeasuresDataset> {
    let (mut records, covariate_names) = read_subjects(subjects)?;
    read_observations_into(observations, &mut records)?;
    let domains = match domains {
        Some(path) => read_domains(path)?,
        None => BTreeMap::new(),
    };
    let dataset = RepeatedMeasuresDataset { subjects: records, covariate_names, domains };
    dataset.validate()?;
    Ok(dataset)
}

struct CsvOut {
    writer: BufWriter<File>,
    path: std::path::PathBuf,
}

impl CsvOut {
    fn create(path: &Path) -> Result<Self> {
        let file = File::create(path).map_err(|e| io_error(path, e))?;
        Ok(CsvOut { writer: BufWriter::new(file), path: path.to_path_buf() })
    }

    fn row(&mut self, fields: &[String]) -> Result<()> {
        writeln!(self.writer, "{}", fields.join(","))
            .map_err(|e| io_error(&self.path, e))
    }

    fn finish(mut self) -> Result<()> {
        self.writer.flush().map_err(|e| io_error(&self.path, e))
    }
}

fn fmt(v: f64) -> String {
    format!("{v}")
}

/// Write the observations, subjects, and domains files a dataset ingests
/// from. The domains file is written even when the mapping is empty.
pub fn write_dataset(
    dataset: &RepeatedMeasuresDataset,
    observations: &Path,
    subjects: &Path,
    domains: &Path,
) -> Result<()> {
    let mut out = CsvOut::create(observations)?;
    out.row(&["subject_id".into(), "feature_id".into(), "value".into()])?;
    for subject in &dataset.subjects {
        for (feature, values) in &subject.observations {
            for &v in values {
                out.row(&[subject.subject_id.clone(), feature.clone(), fmt(v)])?;
            }
        }
    }
    out.finish()?;

    let mut out = CsvOut::create(subjects)?;
    let mut header = vec!["subject_id".to_string(), "outcome".to_string()];
    header.extend(dataset.covariate_names.iter().cloned());
    out.row(&header)?;
    for subject in &dataset.subjects {
        let mut row = vec![subject.subject_id.clone(), fmt(subject.outcome)];
        row.extend(subject.covariates.iter().map(|&c| fmt(c)));
        out.row(&row)?;
    }
    out.finish()?;

    let mut out = CsvOut::create(domains)?;
    out.row(&["feature_id".into(), "domain".into()])?;
    for (feature, domain) in &dataset.domains {
        out.row(&[feature.clone(), domain.clone()])?;
    }
    out.finish()
}

/// Long-format quantile table: `subject_id,feature_id,p,value`, one row per
/// grid level per curve.
pub fn write_quantile_table(path: &Path, curves: &[QuantileFunction]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&["subject_id".into(), "feature_id".into(), "p".into(), "value".into()])?;
    for curve in curves {
        for (&p, &v) in curve.grid().levels().iter().zip(curve.values()) {
            out.row(&[curve.subject_id.clone(), curve.feature_id.clone(), fmt(p), fmt(v)])?;
        }
    }
    out.finish()
}

/// Per-subject L-moment table: `subject_id,feature_id,L1,...,LK`. All rows
/// must share the same order K.
pub fn write_lmoment_table(path: &Path, rows: &[LMomentVector]) -> Result<()> {
    let order = rows.first().map(|r| r.order()).unwrap_or(0);
    let mut out = CsvOut::create(path)?;
    let mut header = vec!["subject_id".to_string(), "feature_id".to_string()];
    header.extend((1..=order).map(|k| format!("L{k}")));
    out.row(&header)?;
    for row in rows {
        if row.order() != order {
            return Err(Error::LengthMismatch { expected: order, found: row.order() });
        }
        let mut fields = vec![row.subject_id.clone(), row.feature_id.clone()];
        fields.extend(row.values().iter().map(|&v| fmt(v)));
        out.row(&fields)?;
    }
    out.finish()
}

/// Plot-ready curve with pointwise band: `p,estimate,lower,upper`.
pub fn write_curve(path: &Path, curve: &FunctionalCoefficient) -> Result<()> {
    write_curve_as(path, "p", curve)
}

/// [`write_curve`] with a caller-chosen abscissa header, for curves whose
/// x-axis is not a probability level (bin midpoints, L-moment values).
pub fn write_curve_as(path: &Path, x_header: &str, curve: &FunctionalCoefficient) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&[x_header.into(), "estimate".into(), "lower".into(), "upper".into()])?;
    for i in 0..curve.levels.len() {
        out.row(&[
            fmt(curve.levels[i]),
            fmt(curve.estimate[i]),
            fmt(curve.lower[i]),
            fmt(curve.upper[i]),
        ])?;
    }
    out.finish()
}

/// Several banded curves in one long table:
/// `<label_header>,<x_header>,estimate,lower,upper`.
pub fn write_labeled_curves(
    path: &Path,
    label_header: &str,
    x_header: &str,
    curves: &[(String, FunctionalCoefficient)],
) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&[
        label_header.into(),
        x_header.into(),
        "estimate".into(),
        "lower".into(),
        "upper".into(),
    ])?;
    for (label, curve) in curves {
        for i in 0..curve.levels.len() {
            out.row(&[
                label.clone(),
                fmt(curve.levels[i]),
                fmt(curve.estimate[i]),
                fmt(curve.lower[i]),
                fmt(curve.upper[i]),
            ])?;
        }
    }
    out.finish()
}

/// Long-format surface sample: `q,p,value` with q varying slowest.
pub fn write_surface(path: &Path, qs: &[f64], ps: &[f64], values: &Array2<f64>) -> Result<()> {
    if values.nrows() != qs.len() || values.ncols() != ps.len() {
        return Err(Error::LengthMismatch {
            expected: qs.len() * ps.len(),
            found: values.nrows() * values.ncols(),
        });
    }
    let mut out = CsvOut::create(path)?;
    out.row(&["q".into(), "p".into(), "value".into()])?;
    for (i, &q) in qs.iter().enumerate() {
        for (j, &p) in ps.iter().enumerate() {
            out.row(&[fmt(q), fmt(p), fmt(values[[i, j]])])?;
        }
    }
    out.finish()
}

/// Model-comparison table: `model,metric,mean,sd,B,k,seed`.
pub fn write_metric_reports(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&[
        "model".into(),
        "metric".into(),
        "mean".into(),
        "sd".into(),
        "B".into(),
        "k".into(),
        "seed".into(),
    ])?;
    for report in reports {
        out.row(&[
            report.model.clone(),
            report.metric.label().to_string(),
            fmt(report.mean),
            fmt(report.sd),
            report.repeats.to_string(),
            report.k.to_string(),
            report.seed.to_string(),
        ])?;
    }
    out.finish()
}

/// Score matrix in long format: `subject_id,score_name,value`, scores in
/// their decomposition order.
pub fn write_jive_scores(
    path: &Path,
    decomposition: &JiveDecomposition,
    subject_ids: &[String],
) -> Result<()> {
    if subject_ids.len() != decomposition.n_subjects() {
        return Err(Error::LengthMismatch {
            expected: decomposition.n_subjects(),
            found: subject_ids.len(),
        });
    }
    let mut out = CsvOut::create(path)?;
    out.row(&["subject_id".into(), "score_name".into(), "value".into()])?;
    for (name, values) in decomposition.score_vectors() {
        for (id, &v) in subject_ids.iter().zip(&values) {
            out.row(&[id.clone(), name.clone(), fmt(v)])?;
        }
    }
    out.finish()
}

/// Loading matrices in long format: `score_name,domain,row_label,value`.
/// Joint loadings live on the stacked variable space, so each domain gets
/// its slice of rows; individual loadings are per domain already.
pub fn write_jive_loadings(path: &Path, decomposition: &JiveDecomposition) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&["score_name".into(), "domain".into(), "row_label".into(), "value".into()])?;
    let joint = &decomposition.joint_components;
    let mut offset = 0;
    for (d, domain) in decomposition.domains.iter().enumerate() {
        let labels = &decomposition.row_labels[d];
        for r in 0..joint.loadings.ncols() {
            for (i, label) in labels.iter().enumerate() {
                out.row(&[
                    format!("joint_{}", r + 1),
                    domain.clone(),
                    label.clone(),
                    fmt(joint.loadings[[offset + i, r]]),
                ])?;
            }
        }
        offset += labels.len();
    }
    for (d, domain) in decomposition.domains.iter().enumerate() {
        let labels = &decomposition.row_labels[d];
        let individual = &decomposition.individual_components[d];
        for r in 0..individual.loadings.ncols() {
            for (i, label) in labels.iter().enumerate() {
                out.row(&[
                    format!("{}_individual_{}", domain, r + 1),
                    domain.clone(),
                    label.clone(),
                    fmt(individual.loadings[[i, r]]),
                ])?;
            }
        }
    }
    out.finish()
}

/// Cross-correlation table between scores and normalized block rows:
/// `score_name,domain,row_label,correlation,degenerate_score`.
pub fn write_score_correlations(path: &Path, rows: &[ScoreCorrelation]) -> Result<()> {
    let mut out = CsvOut::create(path)?;
    out.row(&[
        "score_name".into(),
        "domain".into(),
        "row_label".into(),
        "correlation".into(),
        "degenerate_score".into(),
    ])?;
    for row in rows {
        out.row(&[
            row.score_name.clone(),
            row.domain.clone(),
            row.row_label.clone(),
            fmt(row.correlation),
            row.degenerate_score.to_string(),
        ])?;
    }
    out.finish()
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| io_error(path, e))?;
    let mut writer = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut writer, value)
        .map_err(|e| parse_error(path, e.line() as u64, e.to_string()))?;
    writeln!(writer).map_err(|e| io_error(path, e))?;
    writer.flush().map_err(|e| io_error(path, e))
}

/// Read a JSON document, reporting parse failures with their line.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    serde_json::from_reader(BufReader::new(file))
        .map_err(|e| parse_error(path, e.line() as u64, e.to_string()))
}
