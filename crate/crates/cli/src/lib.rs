//! Front end for the `oedpm` binary: argument parsing, the detect, sweep and
//! bench modes, and the mapping from errors to exit codes.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Parser, ValueEnum};
use oedpm::data::{self, CsvOptions, Dataset, LabelColumn, Metrics, ReportFormat, Standardizer};
use oedpm::ensemble::{self, EnsembleComponent};
use oedpm::math::Matrix;
use oedpm::{CovarianceMode, DetectionReport, EnsembleConfig, ErrorKind, OedpmError, Result, ThresholdRule};

pub const EXIT_OK: i32 = 0;
/// A bench run finished but at least one dataset failed.
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_NUMERIC: i32 = 4;

/// Contamination levels swept when `--phis` is not given.
pub const DEFAULT_PHIS: [f64; 6] = [0.02, 0.05, 0.1, 0.2, 0.3, 0.5];

pub fn exit_code(err: &OedpmError) -> i32 {
    match err.kind() {
        ErrorKind::Usage | ErrorKind::Config => EXIT_CONFIG,
        ErrorKind::Data => EXIT_DATA,
        ErrorKind::Numeric => EXIT_NUMERIC,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum)]
pub enum Mode {
    #[default]
    Detect,
    Sweep,
    Bench,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CovarianceArg {
    Diag,
    Full,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum FormatArg {
    Csv,
    Json,
}

/// Unsupervised outlier detection with ensembles of Dirichlet process
/// Gaussian mixtures.
#[derive(Debug, Parser)]
#[command(name = "oedpm", version)]
pub struct Cli {
    /// Training CSV.
    #[arg(long)]
    input: Option<PathBuf>,
    /// CSV to score; defaults to the training set.
    #[arg(long)]
    test: Option<PathBuf>,
    /// Label column, by header name or zero-based index.
    #[arg(long = "label-col")]
    label_col: Option<String>,
    /// Number of ensemble members.
    #[arg(long = "ensemble-size", default_value_t = ensemble::DEFAULT_ENSEMBLE_SIZE)]
    ensemble_size: usize,
    /// Quantile level for the member thresholds.
    #[arg(long, conflicts_with = "iqr")]
    contamination: Option<f64>,
    /// Use Q1 - 1.5 IQR thresholds instead of a quantile.
    #[arg(long)]
    iqr: bool,
    #[arg(long, value_enum, default_value = "diag")]
    covariance: CovarianceArg,
    /// Truncation level of every mixture.
    #[arg(long, default_value_t = oedpm::dpgm::DEFAULT_TRUNCATION)]
    truncation: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file; standard output when absent.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "csv")]
    format: FormatArg,
    #[arg(long, value_enum, default_value = "detect")]
    mode: Mode,
    /// Comma-separated contamination levels for sweep mode.
    #[arg(long, value_delimiter = ',')]
    phis: Option<Vec<f64>>,
    /// Bench manifest: CSV with header name,path,label_col.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Input files have no header row.
    #[arg(long = "no-header")]
    no_header: bool,
    /// Single-byte field delimiter of input files.
    #[arg(long, default_value = ",")]
    delimiter: char,
}

/// Everything a run needs, independent of how it was specified.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub input: Option<PathBuf>,
    pub test: Option<PathBuf>,
    pub label_column: Option<LabelColumn>,
    pub csv: CsvOptions,
    pub ensemble: EnsembleConfig,
    pub output: Option<PathBuf>,
    pub format: ReportFormat,
    pub mode: Mode,
    pub phis: Vec<f64>,
    pub manifest: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            input: None,
            test: None,
            label_column: None,
            csv: CsvOptions::default(),
            ensemble: EnsembleConfig::default(),
            output: None,
            format: ReportFormat::Csv,
            mode: Mode::Detect,
            phis: DEFAULT_PHIS.to_vec(),
            manifest: None,
        }
    }
}

impl TryFrom<Cli> for RunConfig {
    type Error = OedpmError;

    fn try_from(cli: Cli) -> Result<Self> {
        if !cli.delimiter.is_ascii() {
            return Err(OedpmError::Config(format!(
                "delimiter {:?} is not a single byte",
                cli.delimiter
            )));
        }
        let threshold = if cli.iqr {
            ThresholdRule::Iqr
        } else {
            ThresholdRule::quantile(cli.contamination.unwrap_or(ensemble::DEFAULT_CONTAMINATION))
        };
        let label_column = cli.label_col.as_deref().map(LabelColumn::parse);
        let config = RunConfig {
            input: cli.input,
            test: cli.test,
            csv: CsvOptions {
                has_header: !cli.no_header,
                label_column: label_column.clone(),
                delimiter: cli.delimiter as u8,
            },
            label_column,
            ensemble: EnsembleConfig {
                ensemble_size: cli.ensemble_size,
                threshold,
                covariance_mode: match cli.covariance {
                    CovarianceArg::Diag => CovarianceMode::Diagonal,
                    CovarianceArg::Full => CovarianceMode::Full,
                },
                truncation: cli.truncation,
                master_seed: cli.seed,
                ..EnsembleConfig::default()
            },
            output: cli.output,
            format: match cli.format {
                FormatArg::Csv => ReportFormat::Csv,
                FormatArg::Json => ReportFormat::Json,
            },
            mode: cli.mode,
            phis: cli.phis.unwrap_or_else(|| DEFAULT_PHIS.to_vec()),
            manifest: cli.manifest,
        };
        config.validate()?;
        Ok(config)
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.ensemble.validate()?;
        match self.mode {
            Mode::Detect | Mode::Sweep if self.input.is_none() => {
                Err(OedpmError::Config("--input is required".into()))
            }
            Mode::Sweep if self.label_column.is_none() => {
                Err(OedpmError::Config("sweep mode needs labels (--label-col)".into()))
            }
            Mode::Sweep if self.phis.is_empty() => Err(OedpmError::Config("--phis is empty".into())),
            Mode::Sweep => self
                .phis
                .iter()
                .try_for_each(|&phi| ThresholdRule::quantile(phi).validate()),
            Mode::Bench if self.manifest.is_none() => {
                Err(OedpmError::Config("bench mode needs --manifest".into()))
            }
            _ => Ok(()),
        }
    }
}

/// Parses `args` (including the program name), runs, and returns the exit
/// code. Diagnostics go to standard error.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let result = RunConfig::try_from(cli).and_then(|config| {
        let output = thread_pool()?.install(|| execute(&config))?;
        output.emit(&config, stdout)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("oedpm: {e}");
            exit_code(&e)
        }
    }
}

/// Worker pool sized by `OEDPM_THREADS` (unset or 0 means automatic).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let threads = match std::env::var("OEDPM_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .map_err(|_| OedpmError::Config(format!("OEDPM_THREADS must be a non-negative integer, got {v:?}")))?,
        _ => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| OedpmError::Config(format!("cannot start worker pool: {e}")))
}

/// Rendered results of a run, not yet written anywhere.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub exit_code: i32,
    /// Report, sweep table or bench table.
    pub body: String,
    /// Metrics line of a labelled detect run.
    pub summary: Option<String>,
}

impl RunOutput {
    /// Writes the body to `--output` (or `stdout`). The summary goes to
    /// `stdout` when the body went to a file and to standard error otherwise.
    pub fn emit(&self, config: &RunConfig, stdout: &mut dyn Write) -> Result<i32> {
        match &config.output {
            Some(path) => {
                std::fs::write(path, &self.body).map_err(|source| OedpmError::Io {
                    path: path.clone(),
                    source,
                })?;
                if let Some(s) = &self.summary {
                    writeln!(stdout, "{s}").map_err(stdout_error)?;
                }
            }
            None => {
                stdout.write_all(self.body.as_bytes()).map_err(stdout_error)?;
                if let Some(s) = &self.summary {
                    eprintln!("{s}");
                }
            }
        }
        Ok(self.exit_code)
    }
}

pub fn execute(config: &RunConfig) -> Result<RunOutput> {
    config.validate()?;
    match config.mode {
        Mode::Detect => {
            let outcome = run_detect(config)?;
            Ok(RunOutput {
                exit_code: EXIT_OK,
                body: data::render_report(&outcome.report, config.format)?,
                summary: outcome.report.metrics.as_ref().map(format_metrics),
            })
        }
        Mode::Sweep => {
            let rows = run_sweep(config, &config.phis)?;
            Ok(RunOutput {
                exit_code: EXIT_OK,
                body: render_sweep(&rows),
                summary: None,
            })
        }
        Mode::Bench => {
            let manifest = config.manifest.as_ref().expect("validated");
            let table = run_bench(config, manifest)?;
            Ok(RunOutput {
                exit_code: if table.any_failed() { EXIT_PARTIAL } else { EXIT_OK },
                body: table.render(),
                summary: None,
            })
        }
    }
}

fn stdout_error(source: std::io::Error) -> OedpmError {
    OedpmError::Io {
        path: PathBuf::from("<stdout>"),
        source,
    }
}

pub fn format_metrics(m: &Metrics) -> String {
    format!(
        "precision={:.6} recall={:.6} f1={:.6} tp={} fp={} fn={} tn={}",
        m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_, m.tn
    )
}

/// Standardized training and test matrices plus the test labels.
struct Prepared {
    train: Matrix,
    test: Matrix,
    labels: Option<Vec<u8>>,
    dataset: Dataset,
}

fn prepare(input: &Path, test: Option<&Path>, csv: &CsvOptions) -> Result<Prepared> {
    let dataset = data::load_csv(input, csv)?;
    let standardizer = Standardizer::fit(&dataset.features);
    let train = standardizer.apply(&dataset.features)?;
    let (test, labels) = match test {
        Some(path) => {
            let t = data::load_csv(path, csv)?;
            (standardizer.apply(&t.features)?, t.labels)
        }
        None => (train.clone(), dataset.labels.clone()),
    };
    Ok(Prepared {
        train,
        test,
        labels,
        dataset,
    })
}

fn progress(msg: impl std::fmt::Display) {
    eprintln!("oedpm: {msg}");
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectOutcome {
    pub report: DetectionReport,
    pub components: Vec<EnsembleComponent>,
}

/// Load, standardize, fit, score and (when labels exist) evaluate.
pub fn run_detect(config: &RunConfig) -> Result<DetectOutcome> {
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| OedpmError::Config("--input is required".into()))?;
    let prep = prepare(input, config.test.as_deref(), &config.csv)?;
    progress(format_args!(
        "fitting {} components on {} x {}",
        config.ensemble.ensemble_size,
        prep.train.nrows(),
        prep.train.ncols()
    ));
    let components = ensemble::fit_detector(&prep.train, &config.ensemble)?;
    let mut report = ensemble::score(&prep.test, &components)?;
    report.config = Some(config.ensemble);
    if let Some(labels) = &prep.labels {
        report.metrics = Some(data::evaluate(&report, labels)?);
    }
    Ok(DetectOutcome { report, components })
}

/// One row of a contamination sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub rule: ThresholdRule,
    pub metrics: Metrics,
}

/// Fits once and re-thresholds per level; the fit does not depend on the
/// threshold rule. Rows follow `phis` in order, then one IQR row.
pub fn run_sweep(config: &RunConfig, phis: &[f64]) -> Result<Vec<SweepRow>> {
    let input = config
        .input
        .as_deref()
        .ok_or_else(|| OedpmError::Config("--input is required".into()))?;
    let prep = prepare(input, config.test.as_deref(), &config.csv)?;
    let labels = prep
        .labels
        .as_ref()
        .ok_or_else(|| OedpmError::Config("sweep mode needs labels (--label-col)".into()))?;
    let rules: Vec<ThresholdRule> = phis
        .iter()
        .map(|&phi| ThresholdRule::quantile(phi))
        .chain(std::iter::once(ThresholdRule::Iqr))
        .collect();
    for rule in &rules {
        rule.validate()?;
    }
    progress(format_args!(
        "fitting {} components on {} x {}",
        config.ensemble.ensemble_size,
        prep.train.nrows(),
        prep.train.ncols()
    ));
    let components = ensemble::fit_detector(&prep.train, &config.ensemble)?;
    let table = ensemble::log_density_table(&prep.test, &components)?;
    rules
        .into_iter()
        .map(|rule| {
            let thresholds = components
                .iter()
                .map(|c| c.threshold_for(rule))
                .collect::<Result<Vec<_>>>()?;
            let votes = ensemble::vote_counts(&table, &thresholds)?;
            let report = DetectionReport::from_votes(&votes, thresholds);
            Ok(SweepRow {
                rule,
                metrics: data::evaluate(&report, labels)?,
            })
        })
        .collect()
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("phi,f1\n");
    for r in rows {
        out.push_str(&format!("{},{:.6}\n", r.rule, r.metrics.f1));
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchEntry {
    pub name: String,
    pub path: PathBuf,
    pub label_column: LabelColumn,
}

/// Reads a manifest with header `name,path,label_col`. Relative paths are
/// resolved against the manifest's directory.
pub fn load_manifest(path: &Path) -> Result<Vec<BenchEntry>> {
    let text = std::fs::read_to_string(path).map_err(|source| {
        if source.kind() == std::io::ErrorKind::NotFound {
            OedpmError::MissingFile { path: path.into() }
        } else {
            OedpmError::Io {
                path: path.into(),
                source,
            }
        }
    })?;
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());
    let header = reader
        .headers()
        .map_err(|e| OedpmError::Malformed(format!("{}: {e}", path.display())))?
        .clone();
    if header.iter().collect::<Vec<_>>() != ["name", "path", "label_col"] {
        return Err(OedpmError::Malformed(format!(
            "{}: manifest header must be name,path,label_col",
            path.display()
        )));
    }
    let base = path.parent().unwrap_or(Path::new(""));
    let mut entries = Vec::new();
    for record in reader.records() {
        let r = record.map_err(|e| OedpmError::Malformed(format!("{}: {e}", path.display())))?;
        let file = PathBuf::from(&r[1]);
        entries.push(BenchEntry {
            name: r[0].to_string(),
            path: if file.is_absolute() { file } else { base.join(file) },
            label_column: LabelColumn::parse(&r[2]),
        });
    }
    if entries.is_empty() {
        return Err(OedpmError::Usage(format!("manifest {} lists no datasets", path.display())));
    }
    Ok(entries)
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub name: String,
    pub outcome: std::result::Result<BenchResult, String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchResult {
    pub n: usize,
    pub p: usize,
    pub outlier_pct: f64,
    pub f1: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchTable {
    pub rows: Vec<BenchRow>,
}

impl BenchTable {
    /// Mean F1 over the datasets that ran.
    pub fn average_f1(&self) -> Option<f64> {
        let ok: Vec<f64> = self
            .rows
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|b| b.f1))
            .collect();
        (!ok.is_empty()).then(|| ok.iter().sum::<f64>() / ok.len() as f64)
    }

    pub fn any_failed(&self) -> bool {
        self.rows.iter().any(|r| r.outcome.is_err())
    }

    pub fn render(&self) -> String {
        let mut out = String::from("dataset,n,p,outlier_pct,f1,seconds,error\n");
        for r in &self.rows {
            match &r.outcome {
                Ok(b) => out.push_str(&format!(
                    "{},{},{},{:.2},{:.6},{:.3},\n",
                    r.name, b.n, b.p, b.outlier_pct, b.f1, b.seconds
                )),
                Err(e) => out.push_str(&format!("{},,,,,,\"{}\"\n", r.name, e.replace('"', "'"))),
            }
        }
        match self.average_f1() {
            Some(avg) => out.push_str(&format!("Average,,,,{avg:.6},,\n")),
            None => out.push_str("Average,,,,,,\n"),
        }
        out
    }
}

/// Runs detection on every manifest dataset with the shared ensemble
/// settings. Failures are recorded per row rather than aborting the table.
pub fn run_bench(config: &RunConfig, manifest: &Path) -> Result<BenchTable> {
    config.ensemble.validate()?;
    let entries = load_manifest(manifest)?;
    let rows = entries
        .into_iter()
        .map(|entry| {
            progress(format_args!("bench {}", entry.name));
            let start = Instant::now();
            let outcome = bench_one(config, &entry).map(|mut b| {
                b.seconds = start.elapsed().as_secs_f64();
                b
            });
            if let Err(e) = &outcome {
                progress(format_args!("{} failed: {e}", entry.name));
            }
            BenchRow {
                name: entry.name,
                outcome: outcome.map_err(|e| e.to_string()),
            }
        })
        .collect();
    Ok(BenchTable { rows })
}

fn bench_one(config: &RunConfig, entry: &BenchEntry) -> Result<BenchResult> {
    let csv = CsvOptions {
        label_column: Some(entry.label_column.clone()),
        ..config.csv.clone()
    };
    let prep = prepare(&entry.path, None, &csv)?;
    let labels = prep.labels.as_ref().expect("label column requested");
    let components = ensemble::fit_detector(&prep.train, &config.ensemble)?;
    let report = ensemble::score(&prep.test, &components)?;
    let metrics = data::evaluate(&report, labels)?;
    Ok(BenchResult {
        n: prep.dataset.len(),
        p: prep.dataset.dim(),
        outlier_pct: 100.0 * prep.dataset.outlier_count().unwrap_or(0) as f64 / prep.dataset.len() as f64,
        f1: metrics.f1,
        seconds: 0.0,
    })
}
