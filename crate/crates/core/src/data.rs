//! Dataset ingestion, standardization, evaluation metrics and report output.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::ensemble::DetectionReport;
use crate::error::{OedpmError, Result};
use crate::math::Matrix;

/// Standard deviations below this are treated as zero and replaced by one.
pub const MIN_STD: f64 = 1e-12;

/// Features plus optional binary labels (1 = outlier).
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub features: Matrix,
    pub labels: Option<Vec<u8>>,
    pub feature_names: Option<Vec<String>>,
    pub source: String,
}

impl Dataset {
    pub fn new(features: Matrix, labels: Option<Vec<u8>>, source: impl Into<String>) -> Result<Self> {
        if features.nrows() == 0 || features.ncols() == 0 {
            return Err(OedpmError::Malformed("dataset has no rows or no feature columns".into()));
        }
        if let Some(l) = &labels {
            if l.len() != features.nrows() {
                return Err(OedpmError::usage(format!(
                    "{} labels for {} rows",
                    l.len(),
                    features.nrows()
                )));
            }
            if l.iter().any(|&v| v > 1) {
                return Err(OedpmError::usage("labels must be 0 or 1"));
            }
        }
        Ok(Self {
            features,
            labels,
            feature_names: None,
            source: source.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.features.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    pub fn outlier_count(&self) -> Option<usize> {
        self.labels.as_ref().map(|l| l.iter().map(|&v| v as usize).sum())
    }
}

/// Label column selector: a header name or a zero-based position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LabelColumn {
    Name(String),
    Index(usize),
}

impl LabelColumn {
    /// A bare non-negative integer selects by position, anything else by name.
    pub fn parse(s: &str) -> Self {
        match s.trim().parse::<usize>() {
            Ok(i) => LabelColumn::Index(i),
            Err(_) => LabelColumn::Name(s.trim().to_string()),
        }
    }
}

impl std::fmt::Display for LabelColumn {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LabelColumn::Name(n) => f.write_str(n),
            LabelColumn::Index(i) => write!(f, "{i}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CsvOptions {
    pub has_header: bool,
    pub label_column: Option<LabelColumn>,
    pub delimiter: u8,
}

impl Default for CsvOptions {
    fn default() -> Self {
        Self {
            has_header: true,
            label_column: None,
            delimiter: b',',
        }
    }
}

/// Reads a numeric CSV. A selected label column is removed from the features
/// and binarized: any nonzero value marks an outlier.
pub fn load_csv(path: impl AsRef<Path>, options: &CsvOptions) -> Result<Dataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| io_error(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(options.has_header)
        .delimiter(options.delimiter)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(file);

    let header: Option<Vec<String>> = if options.has_header {
        let h = reader.headers().map_err(|e| csv_error(path, e))?;
        Some(h.iter().map(str::to_string).collect())
    } else {
        None
    };

    let mut width = header.as_ref().map(Vec::len);
    let mut label_idx: Option<usize> = None;
    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut rows = 0usize;

    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let line = record.position().map_or(rows + 1, |p| p.line() as usize);
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let expected = *width.get_or_insert(record.len());
        if record.len() != expected {
            return Err(OedpmError::RaggedRow {
                row: line,
                expected,
                found: record.len(),
            });
        }
        if rows == 0 {
            label_idx = resolve_label(options.label_column.as_ref(), header.as_deref(), expected)?;
        }
        for (j, cell) in record.iter().enumerate() {
            let v = parse_cell(cell).ok_or_else(|| OedpmError::NonNumeric {
                row: line,
                column: j + 1,
                value: cell.to_string(),
            })?;
            if Some(j) == label_idx {
                labels.push(u8::from(v != 0.0));
            } else {
                values.push(v);
            }
        }
        rows += 1;
    }

    if rows == 0 {
        return Err(OedpmError::Malformed(format!("{} contains no data rows", path.display())));
    }
    let p = width.unwrap_or(0) - usize::from(label_idx.is_some());
    let features = Matrix::new(rows, p, values)?;
    let mut dataset = Dataset::new(features, label_idx.map(|_| labels), path.display().to_string())?;
    dataset.feature_names = header.map(|h| {
        h.into_iter()
            .enumerate()
            .filter(|(j, _)| Some(*j) != label_idx)
            .map(|(_, n)| n)
            .collect()
    });
    Ok(dataset)
}

fn resolve_label(selector: Option<&LabelColumn>, header: Option<&[String]>, width: usize) -> Result<Option<usize>> {
    let Some(selector) = selector else {
        return Ok(None);
    };
    let found = match (selector, header) {
        (LabelColumn::Name(name), Some(h)) => h.iter().position(|c| c == name),
        (LabelColumn::Name(_), None) => None,
        (LabelColumn::Index(i), Some(h)) => h
            .iter()
            .position(|c| c == &i.to_string())
            .or((*i < width).then_some(*i)),
        (LabelColumn::Index(i), None) => (*i < width).then_some(*i),
    };
    found
        .map(Some)
        .ok_or_else(|| OedpmError::MissingLabelColumn(selector.to_string()))
}

fn parse_cell(cell: &str) -> Option<f64> {
    cell.parse::<f64>().ok().filter(|v| v.is_finite())
}

fn io_error(path: &Path, e: std::io::Error) -> OedpmError {
    if e.kind() == std::io::ErrorKind::NotFound {
        OedpmError::MissingFile {
            path: path.to_path_buf(),
        }
    } else {
        OedpmError::Io {
            path: path.to_path_buf(),
            source: e,
        }
    }
}

fn csv_error(path: &Path, e: csv::Error) -> OedpmError {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => io_error(path, io),
        csv::ErrorKind::UnequalLengths {
            pos,
            expected_len,
            len,
        } => OedpmError::RaggedRow {
            row: pos.map_or(0, |p| p.line() as usize),
            expected: expected_len as usize,
            found: len as usize,
        },
        other => OedpmError::Malformed(format!("{}: {other:?}", path.display())),
    }
}

/// Writes features (and labels, as a trailing `label` column) with a header.
/// Values use the shortest representation that parses back exactly.
pub fn write_dataset_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::new();
    let names: Vec<String> = match &dataset.feature_names {
        Some(n) => n.clone(),
        None => (0..dataset.dim()).map(|j| format!("x{j}")).collect(),
    };
    out.push_str(&names.join(","));
    if dataset.labels.is_some() {
        out.push_str(",label");
    }
    out.push('\n');
    for (i, row) in dataset.features.rows().enumerate() {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        out.push_str(&cells.join(","));
        if let Some(l) = &dataset.labels {
            out.push_str(&format!(",{}", l[i]));
        }
        out.push('\n');
    }
    write_bytes(path, out.as_bytes())
}

/// Per-feature z-scoring with the population standard deviation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub means: Vec<f64>,
    pub stds: Vec<f64>,
}

impl Standardizer {
    /// Column means and population standard deviations; a deviation below
    /// [`MIN_STD`] is replaced by one.
    pub fn fit(features: &Matrix) -> Self {
        let n = features.nrows() as f64;
        let means = features.column_means();
        let mut var = vec![0.0; features.ncols()];
        for row in features.rows() {
            for ((v, x), m) in var.iter_mut().zip(row).zip(&means) {
                *v += (x - m) * (x - m);
            }
        }
        let stds = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s < MIN_STD {
                    1.0
                } else {
                    s
                }
            })
            .collect();
        Self { means, stds }
    }

    pub fn apply(&self, features: &Matrix) -> Result<Matrix> {
        if features.ncols() != self.means.len() {
            return Err(OedpmError::DimensionMismatch {
                expected: self.means.len(),
                found: features.ncols(),
            });
        }
        let mut out = features.clone();
        for i in 0..out.nrows() {
            for ((x, m), s) in out.row_mut(i).iter_mut().zip(&self.means).zip(&self.stds) {
                *x = (*x - m) / s;
            }
        }
        Ok(out)
    }
}

/// Confusion counts and the derived precision, recall and F1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Metrics {
    /// Any `0/0` ratio is taken as zero.
    pub fn from_counts(tp: usize, fp: usize, fn_: usize, tn: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(tp, tp + fp);
        let recall = ratio(tp, tp + fn_);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            tp,
            fp,
            fn_,
            tn,
        }
    }
}

/// Metrics of binary predictions against binary labels.
pub fn evaluate_predictions(predictions: &[u8], labels: &[u8]) -> Result<Metrics> {
    if predictions.len() != labels.len() {
        return Err(OedpmError::usage(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p != 0, l != 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            (false, false) => tn += 1,
        }
    }
    Ok(Metrics::from_counts(tp, fp, fn_, tn))
}

/// Metrics of a report's memberships against `labels`.
pub fn evaluate(report: &DetectionReport, labels: &[u8]) -> Result<Metrics> {
    evaluate_predictions(&report.memberships, labels)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    #[default]
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = OedpmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(OedpmError::config(format!("unknown report format {other:?}"))),
        }
    }
}

/// Serializes a report. CSV has the header `index,score,is_outlier` and
/// scores with six decimals; JSON carries every report field.
pub fn render_report(report: &DetectionReport, format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Csv => {
            let mut out = String::from("index,score,is_outlier\n");
            for (i, (s, m)) in report.scores.iter().zip(&report.memberships).enumerate() {
                out.push_str(&format!("{i},{s:.6},{m}\n"));
            }
            Ok(out)
        }
        ReportFormat::Json => {
            let mut s = serde_json::to_string_pretty(report)
                .map_err(|e| OedpmError::Numeric(format!("cannot serialize report: {e}")))?;
            s.push('\n');
            Ok(s)
        }
    }
}

pub fn write_report(report: &DetectionReport, path: impl AsRef<Path>, format: ReportFormat) -> Result<()> {
    write_bytes(path.as_ref(), render_report(report, format)?.as_bytes())
}

/// Parses a JSON report produced by [`write_report`].
pub fn read_report_json(path: impl AsRef<Path>) -> Result<DetectionReport> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    serde_json::from_str(&text).map_err(|e| OedpmError::Malformed(format!("{}: {e}", path.display())))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    let wrap = |e| OedpmError::Io {
        path: PathBuf::from(path),
        source: e,
    };
    let mut w = BufWriter::new(File::create(path).map_err(wrap)?);
    w.write_all(bytes).map_err(wrap)?;
    w.flush().map_err(wrap)
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn write(dir: &TempDir, name: &str, text: &str) -> PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn loads_plain_numeric_csv() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "a.csv", "1,2\n3,4\n5,6\n");
        let opts = CsvOptions {
            has_header: false,
            ..CsvOptions::default()
        };
        let d = load_csv(&p, &opts).unwrap();
        assert_eq!((d.len(), d.dim()), (3, 2));
        assert!(d.labels.is_none());
        assert_eq!(d.features.row(2), &[5.0, 6.0]);
    }

    #[test]
    fn extracts_named_label_column() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "b.csv", "a,outlier,b\n1,0,2\n3,1,4\n5,2.5,6\n");
        let opts = CsvOptions {
            label_column: Some(LabelColumn::parse("outlier")),
            ..CsvOptions::default()
        };
        let d = load_csv(&p, &opts).unwrap();
        assert_eq!(d.dim(), 2);
        assert_eq!(d.labels, Some(vec![0, 1, 1]));
        assert_eq!(d.feature_names, Some(vec!["a".into(), "b".into()]));
        assert_eq!(d.features.row(1), &[3.0, 4.0]);

        let opts = CsvOptions {
            label_column: Some(LabelColumn::Index(1)),
            ..CsvOptions::default()
        };
        assert_eq!(load_csv(&p, &opts).unwrap().labels, Some(vec![0, 1, 1]));
    }

    #[test]
    fn reports_distinct_errors() {
        let dir = TempDir::new().unwrap();
        let opts = CsvOptions::default();
        assert!(matches!(
            load_csv(dir.path().join("nope.csv"), &opts),
            Err(OedpmError::MissingFile { .. })
        ));
        let p = write(&dir, "r.csv", "a,b\n1,2\n3\n");
        assert!(matches!(
            load_csv(&p, &opts),
            Err(OedpmError::RaggedRow { row: 3, expected: 2, found: 1 })
        ));
        let p = write(&dir, "n.csv", "a,b\n1,2\n3,x\n");
        assert!(matches!(
            load_csv(&p, &opts),
            Err(OedpmError::NonNumeric { row: 3, column: 2, .. })
        ));
        let p = write(&dir, "l.csv", "a,b\n1,2\n");
        let with_label = CsvOptions {
            label_column: Some(LabelColumn::parse("y")),
            ..opts.clone()
        };
        assert!(matches!(load_csv(&p, &with_label), Err(OedpmError::MissingLabelColumn(_))));
        let p = write(&dir, "e.csv", "a,b\n");
        assert!(matches!(load_csv(&p, &opts), Err(OedpmError::Malformed(_))));
    }

    #[test]
    fn semicolon_delimiter() {
        let dir = TempDir::new().unwrap();
        let p = write(&dir, "s.csv", "x;y\n1.5;-2e3\n");
        let opts = CsvOptions {
            delimiter: b';',
            ..CsvOptions::default()
        };
        assert_eq!(load_csv(&p, &opts).unwrap().features.row(0), &[1.5, -2000.0]);
    }

    #[test]
    fn standardizer_examples() {
        let m = Matrix::from_rows(&[vec![1.0, 5.0], vec![2.0, 5.0], vec![3.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&m);
        let z = s.apply(&m).unwrap();
        let c = 1.224_744_871_391_589;
        for (got, want) in z.column(0).iter().zip([-c, 0.0, c]) {
            assert!((got - want).abs() < 1e-12);
        }
        assert_eq!(z.column(1), vec![0.0; 3]);
        assert_eq!(s.stds[1], 1.0);
        assert!(s.apply(&Matrix::zeros(1, 3)).is_err());
    }

    #[test]
    fn metric_examples() {
        assert_eq!(evaluate_predictions(&[1, 0, 1], &[1, 0, 1]).unwrap().f1, 1.0);
        assert_eq!(evaluate_predictions(&[0, 0, 0], &[1, 0, 1]).unwrap().f1, 0.0);
        let m = Metrics::from_counts(1, 1, 1, 0);
        assert_eq!((m.precision, m.recall, m.f1), (0.5, 0.5, 0.5));
        assert!(evaluate_predictions(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn csv_report_layout() {
        let report = DetectionReport::from_votes(&[1, 2], vec![0.0; 3]);
        let text = render_report(&report, ReportFormat::Csv).unwrap();
        assert_eq!(text, "index,score,is_outlier\n0,0.333333,0\n1,0.666667,1\n");
    }

    #[test]
    fn json_report_round_trips() {
        let dir = TempDir::new().unwrap();
        let mut report = DetectionReport::from_votes(&[1, 2, 0], vec![-1.25, 0.1 + 0.2, -7.0]);
        report.metrics = Some(Metrics::from_counts(1, 0, 0, 2));
        let p = dir.path().join("r.json");
        write_report(&report, &p, ReportFormat::Json).unwrap();
        let first = std::fs::read(&p).unwrap();
        assert_eq!(read_report_json(&p).unwrap(), report);
        write_report(&report, &p, ReportFormat::Json).unwrap();
        assert_eq!(std::fs::read(&p).unwrap(), first);
    }
}
