//! `tcnf`: generate data, train, score, evaluate and search flow models.

mod config;

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tcnf::conditioners::EncoderKind;
use tcnf::data::{self, AnomalyKind, Family, NormStats, TimeSeriesDataset};
use tcnf::flow::{load_model, save_model, FlowModel};
use tcnf::hyperopt::{run_search, write_trials_csv, Objective};
use tcnf::metrics::{evaluate, write_metrics_csv, MetricRow};
use tcnf::score::{compute_latent, score_series, ScoreSeries};
use tcnf::train::train_model;

use config::RunConfig;

const MODEL_FILE: &str = "model.tcnf";

#[derive(Parser)]
#[command(name = "tcnf", version, about = "Temporal-conditioned normalizing flows for time series anomaly detection")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// realnvp, tcnf-base, tcnf-fixed, tcnf-mlp, tcnf-cnn, tcnf-stateless or tcnf-stateful.
    #[arg(long)]
    method: Option<EncoderKind>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    metric_window: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Write train_clean.csv, train_anomalous.csv and test.csv.
    Generate {
        #[arg(long)]
        family: Option<Family>,
        /// Anomaly kind; repeat to cycle through several.
        #[arg(long)]
        anomaly: Vec<AnomalyKind>,
        #[arg(long)]
        len: Option<usize>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a CSV series.
    Train {
        #[arg(long)]
        train: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Per-timestep anomaly scores of a series.
    Score {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Also write scores.svg.
        #[arg(long)]
        svg: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Metrics of a labeled scores CSV.
    Evaluate {
        #[arg(long)]
        scores: PathBuf,
        /// Labeled series, when the scores file has no label column.
        #[arg(long)]
        labels: Option<PathBuf>,
        #[arg(long, default_value = "unnamed")]
        dataset: String,
        #[arg(long, default_value = "unnamed")]
        model_name: String,
        #[command(flatten)]
        common: Common,
    },
    /// Hyperparameter search; writes trials.csv and the refit best model.
    Search {
        #[arg(long)]
        train: Option<PathBuf>,
        /// Labeled series for the selection objective.
        #[arg(long)]
        eval: Option<PathBuf>,
        /// Labeled series scored by the winner.
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long)]
        objective: Option<Objective>,
        #[command(flatten)]
        common: Common,
    },
    /// Latent coordinates and log-determinants of a series.
    ExportLatent {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Mean and standard deviation of metrics over several runs.
    Report {
        /// metrics.csv files of the runs.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(dir) = &common.out_dir {
        cfg.paths.out_dir = Some(dir.clone());
    }
    if let Some(method) = common.method {
        cfg.set_method(method);
    }
    if let Some(k) = common.lookback {
        cfg.encoder.lookback = k;
    }
    if let Some(w) = common.metric_window {
        cfg.metric_window = Some(w);
    }
    if let Some(b) = common.budget {
        cfg.search.budget = b;
    }
    cfg.train.seed = cfg.seed;
    let dir = cfg.out_dir();
    std::fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    Ok(cfg)
}

fn set_path(slot: &mut Option<PathBuf>, flag: Option<PathBuf>) {
    if flag.is_some() {
        *slot = flag;
    }
}

fn require<'a>(path: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    match path {
        Some(p) => Ok(p),
        None => bail!("no {what} file given (flag --{what} or paths.{what})"),
    }
}

/// Loads a series; a header whose last column is `label` marks labels.
fn read_series(path: &Path) -> Result<TimeSeriesDataset> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut first = String::new();
    BufReader::new(file).read_line(&mut first)?;
    let has_labels = first
        .trim_end()
        .rsplit(',')
        .next()
        .is_some_and(|c| c.trim().trim_matches('"').eq_ignore_ascii_case("label"));
    Ok(data::load_csv(path, has_labels)?)
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    let file = File::create(path).with_context(|| format!("cannot create {}", path.display()))?;
    Ok(BufWriter::new(file))
}

fn prepare_with_model(model: &FlowModel, path: &Path) -> Result<TimeSeriesDataset> {
    let raw = read_series(path)?;
    Ok(data::prepare(&raw, model.norm_stats())?)
}

fn metric_rows(scores: &ScoreSeries, window: Option<usize>, dataset: &str, model: &str) -> Result<Vec<MetricRow>> {
    let Some(labels) = &scores.labels else {
        bail!("series has no labels to evaluate against");
    };
    let eval = evaluate(&scores.scores, labels, window)?;
    Ok(eval
        .named()
        .iter()
        .map(|&(metric, value)| MetricRow {
            dataset: dataset.to_string(),
            model: model.to_string(),
            metric: metric.to_string(),
            value,
        })
        .collect())
}

fn write_scores(scores: &ScoreSeries, dir: &Path, svg: bool) -> Result<()> {
    scores.write_csv(create(&dir.join("scores.csv"))?)?;
    if svg {
        let path = dir.join("scores.svg");
        std::fs::write(&path, scores.to_svg()).with_context(|| format!("cannot write {}", path.display()))?;
    }
    Ok(())
}

fn generate(
    mut cfg: RunConfig,
    family: Option<Family>,
    anomaly: Vec<AnomalyKind>,
    len: Option<usize>,
    dim: Option<usize>,
    count: Option<usize>,
    noise: Option<f64>,
) -> Result<()> {
    let spec = &mut cfg.data;
    if let Some(f) = family {
        spec.family = f;
    }
    if !anomaly.is_empty() {
        spec.anomalies = anomaly;
    }
    if let Some(v) = len {
        spec.len = v;
    }
    if let Some(v) = dim {
        spec.dim = v;
    }
    if let Some(v) = count {
        spec.count = v;
    }
    if let Some(v) = noise {
        spec.noise = v;
    }
    let scenario = data::generate_scenario(&cfg.data, cfg.seed)?;
    let dir = cfg.out_dir();
    let mut log = create(&dir.join("anomalies.csv"))?;
    writeln!(log, "file,kind,start,length,magnitude")?;
    for (name, ds) in [
        ("train_clean.csv", &scenario.train_clean),
        ("train_anomalous.csv", &scenario.train_anomalous),
        ("test.csv", &scenario.test),
    ] {
        data::write_csv(ds, &dir.join(name))?;
        for a in &ds.anomalies {
            writeln!(log, "{name},{},{},{},{}", a.kind, a.start, a.length, a.magnitude)?;
        }
    }
    log.flush()?;
    cfg.write_resolved()
}

fn train(mut cfg: RunConfig, train: Option<PathBuf>, epochs: Option<usize>) -> Result<()> {
    set_path(&mut cfg.paths.train, train);
    if let Some(e) = epochs {
        cfg.train.epochs = e;
    }
    let raw = read_series(require(&cfg.paths.train, "train")?)?;
    let stats = NormStats::fit(&raw)?;
    let ds = data::prepare(&raw, Some(&stats))?;
    let (model, report) = train_model(&ds, &cfg.model_config(ds.dim), &cfg.train_config())?;
    let dir = cfg.out_dir();
    save_model(&model, &dir.join(MODEL_FILE))?;
    report.write_csv(create(&dir.join("train_report.csv"))?)?;
    cfg.write_resolved()
}

fn score(mut cfg: RunConfig, model: Option<PathBuf>, data: Option<PathBuf>, svg: bool) -> Result<()> {
    set_path(&mut cfg.paths.model, model);
    set_path(&mut cfg.paths.test, data);
    let model = load_model(require(&cfg.paths.model, "model")?)?;
    let ds = prepare_with_model(&model, require(&cfg.paths.test, "data")?)?;
    cfg.adopt_model(model.config());
    write_scores(&score_series(&model, &ds)?, &cfg.out_dir(), svg)?;
    cfg.write_resolved()
}

/// Reads `t,score[,label]` as written by `score`.
fn read_scores(path: &Path) -> Result<(Vec<f64>, Option<Vec<bool>>)> {
    let ds = read_series(path)?;
    match ds.dim {
        2 => Ok((ds.channel(1), ds.labels)),
        n => bail!("{} has {n} value columns, expected t,score[,label]", path.display()),
    }
}

fn evaluate_cmd(cfg: RunConfig, scores: PathBuf, labels: Option<PathBuf>, dataset: String, model: String) -> Result<()> {
    let (values, own_labels) = read_scores(&scores)?;
    let labels = match labels {
        Some(path) => read_series(&path)?.labels,
        None => own_labels,
    };
    let series = ScoreSeries {
        scores: values,
        labels,
        model_id: model.clone(),
        dataset_id: dataset.clone(),
    };
    if let Some(l) = &series.labels {
        if l.len() != series.scores.len() {
            bail!("{} scores but {} labels", series.scores.len(), l.len());
        }
    }
    let rows = metric_rows(&series, cfg.metric_window, &dataset, &model)?;
    write_metrics_csv(&rows, create(&cfg.out_dir().join("metrics.csv"))?)?;
    cfg.write_resolved()
}

fn search(
    mut cfg: RunConfig,
    train: Option<PathBuf>,
    eval: Option<PathBuf>,
    test: Option<PathBuf>,
    objective: Option<Objective>,
) -> Result<()> {
    set_path(&mut cfg.paths.train, train);
    set_path(&mut cfg.paths.eval, eval);
    set_path(&mut cfg.paths.test, test);
    if let Some(o) = objective {
        cfg.search.objective = o;
    }
    let raw = read_series(require(&cfg.paths.train, "train")?)?;
    let stats = NormStats::fit(&raw)?;
    let train_ds = data::prepare(&raw, Some(&stats))?;
    let eval_ds = match &cfg.paths.eval {
        Some(p) => Some(data::prepare(&read_series(p)?, Some(&stats))?),
        None => None,
    };
    let result = run_search(&train_ds, eval_ds.as_ref(), &cfg.search_config())?;
    let dir = cfg.out_dir();
    write_trials_csv(&result.trials, create(&dir.join("trials.csv"))?)?;
    save_model(&result.model, &dir.join(MODEL_FILE))?;
    result.report.write_csv(create(&dir.join("train_report.csv"))?)?;
    let best = toml::to_string(&result.model_config).context("cannot serialize the best model config")?;
    let seed = result.trials[result.best].seed;
    std::fs::write(dir.join("best.toml"), format!("seed = {seed}\n\n{best}"))?;
    if let Some(p) = &cfg.paths.test {
        let test_ds = data::prepare(&read_series(p)?, Some(&stats))?;
        let scores = score_series(&result.model, &test_ds)?;
        write_scores(&scores, &dir, false)?;
        if scores.labels.is_some() {
            let name = p.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
            let rows = metric_rows(&scores, cfg.metric_window, &name, cfg.encoder.kind.method_name())?;
            write_metrics_csv(&rows, create(&dir.join("metrics.csv"))?)?;
        }
    }
    cfg.write_resolved()
}

fn export_latent(mut cfg: RunConfig, model: Option<PathBuf>, data: Option<PathBuf>) -> Result<()> {
    set_path(&mut cfg.paths.model, model);
    set_path(&mut cfg.paths.test, data);
    let model = load_model(require(&cfg.paths.model, "model")?)?;
    let ds = prepare_with_model(&model, require(&cfg.paths.test, "data")?)?;
    cfg.adopt_model(model.config());
    compute_latent(&model, &ds)?.write_csv(create(&cfg.out_dir().join("latent.csv"))?)?;
    cfg.write_resolved()
}

/// Parses `dataset,model,metric,value` rows, skipping `#` comment lines.
fn read_metrics(path: &Path) -> Result<Vec<MetricRow>> {
    let file = File::open(path).with_context(|| format!("cannot open {}", path.display()))?;
    let mut rows = Vec::new();
    let mut header = false;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if !header {
            header = true;
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        let [dataset, model, metric, value] = fields[..] else {
            bail!("{} line {}: expected 4 fields", path.display(), i + 1);
        };
        let value = value
            .parse()
            .with_context(|| format!("{} line {}: bad value '{value}'", path.display(), i + 1))?;
        rows.push(MetricRow {
            dataset: dataset.into(),
            model: model.into(),
            metric: metric.into(),
            value,
        });
    }
    Ok(rows)
}

/// Mean and sample standard deviation (`None` for a single run).
fn mean_std(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, Some(var.sqrt()))
}

fn report(cfg: RunConfig, metrics: Vec<PathBuf>) -> Result<()> {
    let mut groups: BTreeMap<(String, String, String), Vec<f64>> = BTreeMap::new();
    for path in &metrics {
        for row in read_metrics(path)? {
            groups.entry((row.dataset, row.model, row.metric)).or_default().push(row.value);
        }
    }
    let mut out = create(&cfg.out_dir().join("report.csv"))?;
    writeln!(out, "dataset,model,metric,runs,mean,std")?;
    for ((dataset, model, metric), values) in &groups {
        let (mean, std) = mean_std(values);
        let std_text = std.map(|s| s.to_string()).unwrap_or_default();
        writeln!(out, "{dataset},{model},{metric},{},{mean},{std_text}", values.len())?;
        println!(
            "{dataset:<16} {model:<16} {metric:<10} {mean:.4} ± {:.4} (n={})",
            std.unwrap_or(0.0),
            values.len()
        );
    }
    out.flush()?;
    cfg.write_resolved()
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Generate {
            family,
            anomaly,
            len,
            dim,
            count,
            noise,
            common,
        } => generate(resolve(&common)?, family, anomaly, len, dim, count, noise),
        Command::Train { train: t, epochs, common } => train(resolve(&common)?, t, epochs),
        Command::Score {
            model,
            data,
            svg,
            common,
        } => score(resolve(&common)?, model, data, svg),
        Command::Evaluate {
            scores,
            labels,
            dataset,
            model_name,
            common,
        } => evaluate_cmd(resolve(&common)?, scores, labels, dataset, model_name),
        Command::Search {
            train: t,
            eval,
            test,
            objective,
            common,
        } => search(resolve(&common)?, t, eval, test, objective),
        Command::ExportLatent { model, data, common } => export_latent(resolve(&common)?, model, data),
        Command::Report { metrics, common } => report(resolve(&common)?, metrics),
    }
}

/// Kind tag of the innermost library error, if any.
fn error_kind(err: &anyhow::Error) -> &'static str {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<tcnf::Error>() {
            return e.kind();
        }
        if cause.is::<toml::de::Error>() {
            return "config";
        }
    }
    if err.chain().any(|c| c.is::<std::io::Error>()) {
        "io"
    } else {
        "cli"
    }
}

/// One line: `error[<kind>]: <message chain>`.
fn error_line(kind: &str, message: &str) -> String {
    let flat: Vec<&str> = message.split_whitespace().collect();
    format!("error[{kind}]: {}", flat.join(" "))
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("{}", error_line("usage", first));
            return ExitCode::from(2);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", error_line(error_kind(&e), &format!("{e:#}")));
            ExitCode::FAILURE
        }
    }
}
