use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Subcommand};
use delcert::calibration::{create_bins, optimize_expected_lengths, BinSpec, CalibrationParams};
use delcert::certification::CertifyConfig;
use delcert::classifiers::BaseClassifier;
use delcert::dataset::{load_dataset, load_token_table, Dataset, DatasetFormat};
use delcert::estimation::DEFAULT_ALPHA;
use delcert::evaluation::certify_dataset;
use delcert::oracle::{run_suite, SuiteConfig};
use delcert::report::{
    certified_accuracy_curve, default_thresholds, read_records, summary_stats, write_curve_csv, write_records,
    CurveMode,
};
use delcert::sequence::{EditOps, TokenTable};

use crate::builders::{build_classifier, build_policy, parse_list, RemoteSettings};
use crate::ValidationFailed;

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Certify every input of a dataset and write per-input records.
    Certify(CertifyArgs),
    /// Choose binned expected lengths and write the resulting policy.
    Calibrate(CalibrateArgs),
    /// Check the pairwise bounds against exact probabilities on small inputs.
    OracleCheck(OracleArgs),
    /// Certified-accuracy curves and summary statistics from certify output.
    Report(ReportArgs),
}

#[derive(Args, Debug)]
pub struct DataArgs {
    /// JSONL dataset with `tokens` or `text` and `label` fields.
    #[arg(long, env = "DELCERT_DATASET")]
    dataset: PathBuf,
    /// auto, tokens or text.
    #[arg(long, env = "DELCERT_FORMAT", default_value = "auto")]
    format: DatasetFormat,
    /// JSON array of words to seed the token table.
    #[arg(long, env = "DELCERT_TOKEN_TABLE")]
    token_table: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct ClassifierArgs {
    /// constant:L[:C], keyword:W,..[:T], hash:S:C or remote[:ENDPOINT].
    #[arg(long, env = "DELCERT_CLASSIFIER")]
    classifier: String,
    /// tcp://host:port or unix:///path for a remote classifier.
    #[arg(long, env = "DELCERT_ENDPOINT")]
    endpoint: Option<String>,
    #[arg(long, env = "DELCERT_MAX_BATCH", default_value_t = 256)]
    max_batch: usize,
    /// Per-request timeout in seconds.
    #[arg(long, env = "DELCERT_TIMEOUT", default_value_t = 30.0)]
    timeout: f64,
    #[arg(long, env = "DELCERT_ATTEMPTS", default_value_t = 3)]
    attempts: u32,
}

#[derive(Args, Debug)]
pub struct SamplingArgs {
    /// Allowed edits, e.g. `del,ins,sub`.
    #[arg(long, env = "DELCERT_OPS", default_value = "del,ins,sub")]
    ops: EditOps,
    #[arg(long, env = "DELCERT_ALPHA", default_value_t = DEFAULT_ALPHA)]
    alpha: f64,
    /// Vocabulary size for the region cardinality; inferred from the data by default.
    #[arg(long, env = "DELCERT_VOCAB_SIZE")]
    vocab_size: Option<usize>,
    #[arg(long, env = "DELCERT_SEED")]
    seed: u64,
    /// Worker threads; all cores by default.
    #[arg(long, env = "DELCERT_WORKERS")]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
pub struct CertifyArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Policy JSON file, inline JSON, fixed:P, length:P_LB:P:K or matched:P.
    #[arg(long, env = "DELCERT_POLICY")]
    policy: String,
    #[arg(long, env = "DELCERT_N_PRED", default_value_t = 1000)]
    n_pred: u64,
    #[arg(long, env = "DELCERT_N_CERT", default_value_t = 4000)]
    n_cert: u64,
    #[arg(long, env = "DELCERT_R_MAX")]
    r_max: Option<usize>,
    /// Directory for `results.jsonl` and `summary.json`.
    #[arg(long, env = "DELCERT_OUT")]
    out: PathBuf,
    /// Record per-input wall-clock time (makes output non-reproducible).
    #[arg(long)]
    timing: bool,
}

#[derive(Args, Debug)]
pub struct CalibrateArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    classifier: ClassifierArgs,
    #[command(flatten)]
    sampling: SamplingArgs,
    /// Bin boundaries such as `0,137,230,324,inf`; derived from the data when absent.
    #[arg(long, env = "DELCERT_BINS")]
    bins: Option<String>,
    #[arg(long, env = "DELCERT_MIN_COUNT", default_value_t = 25)]
    min_count: usize,
    #[arg(long, env = "DELCERT_OUTLIER_PCT", default_value_t = 1.0)]
    outlier_pct: f64,
    /// Target certified accuracy.
    #[arg(long, env = "DELCERT_TAU", default_value_t = 0.75)]
    tau: f64,
    #[arg(long, env = "DELCERT_TOL", default_value_t = 1.0, allow_negative_numbers = true)]
    tol: f64,
    /// Samples drawn per bin.
    #[arg(long, env = "DELCERT_M", default_value_t = 100)]
    m: usize,
    #[arg(long, env = "DELCERT_N_PRED", default_value_t = 32)]
    n_pred: u64,
    #[arg(long, env = "DELCERT_N_CERT", default_value_t = 256)]
    n_cert: u64,
    /// Deletion rate giving the first bin's expected length.
    #[arg(long, default_value_t = 0.9)]
    first_bin_rate: f64,
    /// Policy output path; stdout when absent.
    #[arg(long, env = "DELCERT_OUT")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct OracleArgs {
    #[arg(long, default_value_t = 100)]
    tables: usize,
    #[arg(long, default_value_t = 2)]
    vocab_size: usize,
    #[arg(long, default_value_t = 2)]
    classes: usize,
    #[arg(long, default_value = "4,5,6")]
    lengths: String,
    #[arg(long, default_value_t = 2)]
    radius: usize,
    #[arg(long, default_value = "0.5,0.7,0.9")]
    rates: String,
    #[arg(long, default_value = "0.5,0.8,0.95,0.99")]
    biases: String,
    #[arg(long, default_value = "del,ins,sub")]
    ops: EditOps,
    #[arg(long, env = "DELCERT_SEED", default_value_t = 0)]
    seed: u64,
    #[arg(long, env = "DELCERT_WORKERS")]
    workers: Option<usize>,
    /// Write every check as JSONL.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Adds this amount to every lower bound, to exercise failure handling.
    #[arg(long, hide = true, default_value_t = 0.0)]
    corrupt_lb: f64,
}

#[derive(Args, Debug)]
pub struct ReportArgs {
    /// `results.jsonl` written by `certify`.
    #[arg(long, env = "DELCERT_RESULTS")]
    results: PathBuf,
    /// Radius thresholds; `0..=max` by default.
    #[arg(long)]
    radius_thresholds: Option<String>,
    /// Log-cardinality thresholds; evenly spaced by default.
    #[arg(long)]
    cc_thresholds: Option<String>,
    /// Number of default log-cardinality steps.
    #[arg(long, default_value_t = 50)]
    cc_steps: usize,
    /// Directory for `curve_radius.csv`, `curve_log_cc.csv` and `summary.json`.
    #[arg(long, env = "DELCERT_OUT")]
    out: PathBuf,
}

pub fn run(command: Command) -> Result<()> {
    match command {
        Command::Certify(a) => with_workers(a.sampling.workers, || cmd_certify(&a)),
        Command::Calibrate(a) => with_workers(a.sampling.workers, || cmd_calibrate(&a)),
        Command::OracleCheck(a) => with_workers(a.workers, || cmd_oracle_check(&a)),
        Command::Report(a) => cmd_report(&a),
    }
}

fn with_workers<T: Send>(workers: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match workers {
        Some(0) => bail!("--workers must be positive"),
        Some(n) => rayon::ThreadPoolBuilder::new().num_threads(n).build()?.install(f),
        None => f(),
    }
}

/// Loads the dataset after building the classifier, so keyword words come
/// first in the token table.
fn load_inputs(data: &DataArgs, classifier: &ClassifierArgs) -> Result<(Dataset, Box<dyn BaseClassifier>)> {
    let mut table = match &data.token_table {
        Some(p) => load_token_table(p).with_context(|| format!("reading token table {}", p.display()))?,
        None => TokenTable::new(),
    };
    let remote = RemoteSettings {
        endpoint: classifier.endpoint.clone(),
        max_batch: classifier.max_batch,
        timeout_secs: classifier.timeout,
        attempts: classifier.attempts,
    };
    let base = build_classifier(&classifier.classifier, &mut table, &remote)?;
    let ds = load_dataset(&data.dataset, data.format, table)
        .with_context(|| format!("reading dataset {}", data.dataset.display()))?;
    if ds.is_empty() {
        return Err(delcert::Error::EmptyInput(format!("dataset {} has no examples", data.dataset.display())).into());
    }
    let classes = base.num_classes();
    if let Some(e) = ds.examples.iter().find(|e| e.label >= classes) {
        bail!("label {} exceeds the classifier's {classes} classes", e.label);
    }
    Ok((ds, base))
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<()> {
    let mut f = create_file(path)?;
    serde_json::to_writer_pretty(&mut f, value)?;
    writeln!(f)?;
    f.flush()?;
    Ok(())
}

fn cmd_certify(a: &CertifyArgs) -> Result<()> {
    let (ds, base) = load_inputs(&a.data, &a.classifier)?;
    let policy = build_policy(&a.policy, ds.mean_length())?;
    let config = CertifyConfig {
        ops: a.sampling.ops,
        alpha: a.sampling.alpha,
        n_pred: a.n_pred,
        n_cert: a.n_cert,
        r_max: a.r_max,
        vocab_size: a.sampling.vocab_size.unwrap_or_else(|| ds.inferred_vocab_size()),
    };
    config.validate()?;
    log::info!("certifying {} inputs under {policy:?}", ds.len());
    let records = certify_dataset(base.as_ref(), &ds.examples, &policy, &config, a.sampling.seed, a.timing)?;

    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    write_records(create_file(&a.out.join("results.jsonl"))?, &records)?;
    let summary = summary_stats(&records)?.to_flat_json();
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<()> {
    let params = CalibrationParams {
        tau: a.tau,
        tol: a.tol,
        m: a.m,
        first_bin_rate: a.first_bin_rate,
        certify: CertifyConfig {
            ops: a.sampling.ops,
            alpha: a.sampling.alpha,
            n_pred: a.n_pred,
            n_cert: a.n_cert,
            r_max: None,
            vocab_size: a.sampling.vocab_size.unwrap_or(2),
        },
    };
    // fail on bad settings before any data or network work
    params.validate()?;
    let (ds, base) = load_inputs(&a.data, &a.classifier)?;
    let params = CalibrationParams {
        certify: CertifyConfig {
            vocab_size: a.sampling.vocab_size.unwrap_or_else(|| ds.inferred_vocab_size()),
            ..params.certify
        },
        ..params
    };
    let bins = match &a.bins {
        Some(b) => BinSpec::from_boundaries(parse_list(b)?)?,
        None => create_bins(&ds.lengths(), a.min_count, a.outlier_pct)?,
    };
    log::info!("bins {:?} with counts {:?}", bins.boundaries, bins.counts);
    let result = optimize_expected_lengths(base.as_ref(), &ds.examples, &bins, &params, a.sampling.seed)?;
    for b in &result.bins {
        log::info!("{}", serde_json::to_string(b)?);
    }
    let policy = serde_json::to_value(result.policy()?)?;
    match &a.out {
        Some(p) => write_json(p, &policy)?,
        None => println!("{}", serde_json::to_string_pretty(&policy)?),
    }
    Ok(())
}

fn cmd_oracle_check(a: &OracleArgs) -> Result<()> {
    let parse_usize = |s: &str| -> Result<Vec<usize>> {
        s.split(',')
            .map(|t| t.trim().parse::<usize>().with_context(|| format!("bad length `{t}`")))
            .collect()
    };
    let config = SuiteConfig {
        tables: a.tables,
        vocab_size: a.vocab_size,
        num_classes: a.classes,
        lengths: parse_usize(&a.lengths)?,
        radius: a.radius,
        rates: parse_list(&a.rates)?,
        biases: parse_list(&a.biases)?,
        ops: a.ops,
        seed: a.seed,
    };
    let report = run_suite(&config, a.corrupt_lb)?;
    if let Some(path) = &a.out {
        let mut f = create_file(path)?;
        report.write_jsonl(&mut f)?;
        f.flush()?;
    }
    let violations = report.violation_count();
    let summary = serde_json::json!({
        "checks": report.checks.len(),
        "violations": violations,
        "min_lb_margin": report.min_lb_margin(),
        "min_ub_margin": report.min_ub_margin(),
    });
    println!("{summary}");
    for v in report.violations().take(5) {
        eprintln!("violation: {}", serde_json::to_string(v)?);
    }
    if violations > 0 {
        return Err(ValidationFailed(violations).into());
    }
    Ok(())
}

fn cmd_report(a: &ReportArgs) -> Result<()> {
    let file = File::open(&a.results)
        .map_err(delcert::Error::from)
        .with_context(|| format!("opening {}", a.results.display()))?;
    let records = read_records(io::BufReader::new(file))?;
    if records.is_empty() {
        return Err(delcert::Error::EmptyInput(format!("{} has no records", a.results.display())).into());
    }
    fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    for (mode, given, file) in [
        (CurveMode::Radius, &a.radius_thresholds, "curve_radius.csv"),
        (CurveMode::LogCardinality, &a.cc_thresholds, "curve_log_cc.csv"),
    ] {
        let thresholds = match given {
            Some(t) => parse_list(t)?,
            None => default_thresholds(&records, mode, a.cc_steps),
        };
        let curve = certified_accuracy_curve(&records, &thresholds, mode)?;
        write_curve_csv(create_file(&a.out.join(file))?, &curve)?;
    }
    let summary = summary_stats(&records)?.to_flat_json();
    write_json(&a.out.join("summary.json"), &summary)?;
    println!("{}", serde_json::to_string(&summary)?);
    Ok(())
}
