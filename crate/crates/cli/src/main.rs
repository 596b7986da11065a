use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use trajscope_core::evidence::EvidenceSample;
use trajscope_core::filter::filter_stats;
use trajscope_core::reference::{train_reference, ReferenceGenerator, Stage1Config, DEFAULT_GENERATOR_WIDTH, DEFAULT_TIME_DIM};
use trajscope_core::sim::emit_plot_csv;
use trajscope_core::train::{auroc_of, grid_search, run_two_stage, GridSpec, TrainConfig, TrainedModel};
use trajscope_core::{Dataset, Error, IgnoreSpec, Label, SimConfig};

/// Environment variable naming the directory relative `--data` paths resolve against.
const DATA_DIR_ENV: &str = "TRAJSCOPE_DATA_DIR";

#[derive(Parser)]
#[command(name = "trajscope", version, about = "Hallucination detection from denoising entropy trajectories")]
struct Cli {
    /// Print progress to stderr.
    #[arg(short, long, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a labelled synthetic dataset.
    Simulate {
        /// Regimes file (TOML); the built-in two-regime suite when omitted.
        #[arg(long)]
        regimes: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Also write per-class evidence curves as CSV.
        #[arg(long)]
        plot: Option<PathBuf>,
    },
    /// Write per-step evidence vectors as CSV.
    Evidence {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = trajscope_core::evidence::DEFAULT_TOP_K)]
        k: usize,
        #[command(flatten)]
        filter: FilterArgs,
    },
    /// Count kept and filtered tokens per category.
    FilterStats {
        #[command(flatten)]
        data: DataArg,
        #[command(flatten)]
        filter: FilterArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train only the reference generator on the factual samples of a dataset.
    TrainRef {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Two-stage training; writes model.json, report.json and epochs.csv.
    Train {
        #[command(flatten)]
        data: DataArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Score every trajectory with a trained model.
    Score {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// AUROC of a trained model on a labelled dataset.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Report path; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Exhaustive hyperparameter search with validation-based selection.
    Gridsearch {
        #[arg(long)]
        grid: PathBuf,
        #[command(flatten)]
        data: DataArg,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        overrides: Overrides,
    },
}

#[derive(Args)]
struct DataArg {
    /// Dataset file (JSONL, optionally gzipped).
    #[arg(long = "data")]
    path: PathBuf,
}

impl DataArg {
    fn resolve(&self) -> PathBuf {
        match std::env::var_os(DATA_DIR_ENV) {
            Some(dir) if self.path.is_relative() => Path::new(&dir).join(&self.path),
            _ => self.path.clone(),
        }
    }

    fn load(&self) -> Result<Dataset, Error> {
        Dataset::read(self.resolve())
    }
}

#[derive(Args)]
struct FilterArgs {
    /// Ignore-set file (TOML).
    #[arg(long)]
    ignore: Option<PathBuf>,
    /// Keep every token.
    #[arg(long, conflicts_with = "ignore")]
    no_filter: bool,
}

impl FilterArgs {
    fn spec(&self) -> Result<IgnoreSpec, Error> {
        match (&self.ignore, self.no_filter) {
            (Some(path), _) => IgnoreSpec::from_toml_file(path),
            (None, true) => Ok(IgnoreSpec::empty()),
            (None, false) => Ok(IgnoreSpec::standard()),
        }
    }
}

/// Config file plus flag overrides; flags win.
#[derive(Args)]
struct Overrides {
    /// Training config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    lambda1: Option<f64>,
    #[arg(long)]
    lambda2: Option<f64>,
    #[arg(long)]
    quantile: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    #[arg(long)]
    warmup: Option<f64>,
    #[arg(long)]
    standardize: bool,
    #[command(flatten)]
    filter: FilterArgs,
}

impl Overrides {
    fn apply(&self, mut c: TrainConfig) -> Result<TrainConfig, Error> {
        if let Some(v) = self.seed {
            c.seed = v;
        }
        if let Some(v) = self.k {
            c.top_k = v;
        }
        if let Some(v) = self.lambda1 {
            c.detector.lambda_path = v;
        }
        if let Some(v) = self.lambda2 {
            c.detector.lambda_rebound = v;
        }
        if let Some(v) = self.quantile {
            c.detector.quantile_level = v;
        }
        if let Some(v) = self.beta {
            c.detector.beta = v;
        }
        if let Some(v) = self.warmup {
            c.stage2.warmup_fraction = v;
        }
        if self.standardize {
            c.standardize = true;
        }
        if self.filter.ignore.is_some() || self.filter.no_filter {
            c.ignore = self.filter.spec()?;
        }
        c.validate()?;
        Ok(c)
    }

    fn resolve(&self) -> Result<TrainConfig, Error> {
        let base = match &self.config {
            Some(path) => TrainConfig::from_toml_file(path)?,
            None => TrainConfig::default(),
        };
        self.apply(base)
    }
}

fn write_file(path: &Path, contents: &str) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    fs::write(path, contents).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    serde_json::to_string_pretty(value).expect("serializable report") + "\n"
}

fn label_field(label: Label) -> String {
    label.as_binary().map(|y| y.to_string()).unwrap_or_default()
}

fn evidence_csv(dataset: &Dataset, spec: &IgnoreSpec, k: usize) -> String {
    let mut out = String::from("id,label,t,mean_entropy,max_entropy,topk_mean_entropy,kept_count\n");
    for raw in &dataset.trajectories {
        let sample = EvidenceSample::from_raw(raw, spec, k);
        let max_step = sample.evidence.max_step();
        for (j, v) in sample.evidence.vectors.iter().enumerate() {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{}",
                raw.id,
                label_field(raw.label),
                max_step - j,
                v.mean_entropy,
                v.max_entropy,
                v.topk_mean_entropy,
                sample.evidence.kept_counts[j]
            );
        }
    }
    out
}

#[derive(Serialize)]
struct FilterReport {
    data: PathBuf,
    ignore: IgnoreSpec,
    kept: u64,
    filtered: std::collections::BTreeMap<String, u64>,
}

#[derive(Serialize)]
struct ReferenceReport<'a> {
    config: &'a TrainConfig,
    factual_samples: usize,
    loss: Vec<f64>,
    generator: ReferenceGenerator,
}

#[derive(Serialize)]
struct EvalReport<'a> {
    model: &'a Path,
    data: PathBuf,
    samples: usize,
    auroc: f64,
    top_k: usize,
    standardized: bool,
    ignore: &'a IgnoreSpec,
    detector: &'a trajscope_core::DetectorConfig,
}

#[derive(Serialize)]
struct GridSummary<'a> {
    runs: usize,
    best_index: usize,
    best_val_auroc: f64,
    best_test_auroc: f64,
    best: &'a TrainConfig,
}

fn run(cli: Cli) -> Result<(), Error> {
    let say = |msg: String| {
        if cli.verbose {
            eprintln!("{msg}");
        }
    };
    match &cli.command {
        Command::Simulate {
            regimes,
            out,
            seed,
            plot,
        } => {
            let config = match regimes {
                Some(path) => SimConfig::from_toml_file(path)?,
                None => SimConfig::default_suite(),
            };
            let dataset = trajscope_core::simulate_dataset(&config, *seed)?;
            dataset.write(out)?;
            if let Some(plot) = plot {
                emit_plot_csv(&dataset, &IgnoreSpec::standard(), trajscope_core::evidence::DEFAULT_TOP_K, plot)?;
            }
            say(format!("wrote {} trajectories to {}", dataset.len(), out.display()));
        }
        Command::Evidence { data, out, k, filter } => {
            if *k == 0 {
                return Err(Error::Config("--k must be positive".into()));
            }
            let dataset = data.load()?;
            write_file(out, &evidence_csv(&dataset, &filter.spec()?, *k))?;
        }
        Command::FilterStats { data, filter, out } => {
            let dataset = data.load()?;
            let spec = filter.spec()?;
            let stats = filter_stats(&dataset, &spec);
            let report = FilterReport {
                data: data.resolve(),
                kept: stats.kept,
                filtered: stats.filtered.iter().map(|(c, n)| (c.as_str().to_string(), *n)).collect(),
                ignore: spec,
            };
            match out {
                Some(path) => write_file(path, &to_json(&report))?,
                None => print!("{}", to_json(&report)),
            }
        }
        Command::TrainRef { data, out, overrides } => {
            let config = overrides.resolve()?;
            let dataset = data.load()?;
            let factual: Vec<EvidenceSample> = dataset
                .trajectories
                .iter()
                .filter(|t| t.label == Label::Factual)
                .map(|t| EvidenceSample::from_raw(t, &config.ignore, config.top_k))
                .collect();
            let mut generator = ReferenceGenerator::new(
                dataset.header.d_q,
                DEFAULT_TIME_DIM,
                DEFAULT_GENERATOR_WIDTH,
                config.seed.wrapping_add(1),
            );
            let stage1: &Stage1Config = &config.stage1;
            let loss = train_reference(&mut generator, &factual, stage1, config.seed.wrapping_add(2))?;
            say(format!("final reference loss {:?}", loss.last()));
            let report = ReferenceReport {
                config: &config,
                factual_samples: factual.len(),
                loss,
                generator,
            };
            write_file(out, &to_json(&report))?;
        }
        Command::Train { data, out, overrides } => {
            let config = overrides.resolve()?;
            let dataset = data.load()?;
            let outcome = run_two_stage(&config, &dataset)?;
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            outcome.model.save(out.join("model.json"))?;
            write_file(&out.join("report.json"), &outcome.report.to_json())?;
            write_file(&out.join("epochs.csv"), &outcome.report.epochs_csv())?;
            say(format!(
                "selected epoch {}, validation AUROC {:.4}, test AUROC {:.4}",
                outcome.report.selected_epoch, outcome.report.best_val_auroc, outcome.report.test_auroc
            ));
        }
        Command::Score { model, data, out } => {
            let model = TrainedModel::load(model)?;
            let dataset = data.load()?;
            let records = model.score_dataset(&dataset)?;
            let mut csv = String::from("id,label,probability,path_score,rebound_score");
            for t in (0..=dataset.header.max_step).rev() {
                let _ = write!(csv, ",w{t}");
            }
            csv.push('\n');
            for r in &records {
                let _ = write!(
                    csv,
                    "{},{},{},{},{}",
                    r.id,
                    label_field(r.label),
                    r.probability,
                    r.path_score,
                    r.rebound_score
                );
                for w in &r.weights {
                    let _ = write!(csv, ",{w}");
                }
                csv.push('\n');
            }
            write_file(out, &csv)?;
        }
        Command::Eval { model: model_path, data, out } => {
            let model = TrainedModel::load(model_path)?;
            let dataset = data.load()?;
            if let Some(t) = dataset.trajectories.iter().find(|t| t.label == Label::Unlabeled) {
                return Err(Error::Unlabeled(format!("eval needs labels; trajectory {} is unlabeled", t.id)));
            }
            let records = model.score_dataset(&dataset)?;
            let report = EvalReport {
                model: model_path,
                data: data.resolve(),
                samples: records.len(),
                auroc: auroc_of(&records)?,
                top_k: model.top_k,
                standardized: model.standardizer.is_some(),
                ignore: &model.ignore,
                detector: &model.detector.config,
            };
            match out {
                Some(path) => write_file(path, &to_json(&report))?,
                None => print!("{}", to_json(&report)),
            }
        }
        Command::Gridsearch {
            grid,
            data,
            out,
            overrides,
        } => {
            let mut spec = GridSpec::from_toml_file(grid)?;
            spec.base = overrides.apply(spec.base)?;
            let dataset = data.load()?;
            say(format!("running {} configurations", spec.len()));
            let result = grid_search(&spec, &dataset)?;
            fs::create_dir_all(out).map_err(|e| io_error(out, e))?;
            let best = &result.reports[result.best_index];
            let summary = GridSummary {
                runs: result.reports.len(),
                best_index: result.best_index,
                best_val_auroc: best.best_val_auroc,
                best_test_auroc: best.test_auroc,
                best: &result.best,
            };
            write_file(&out.join("best.json"), &to_json(&summary))?;
            write_file(&out.join("reports.json"), &to_json(&result.reports))?;
        }
    }
    Ok(())
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Io { .. } => 3,
        Error::Parse { .. } | Error::Invalid { .. } | Error::Dimension { .. } | Error::Config(_) | Error::Unlabeled(_) => 4,
        Error::NoForward | Error::NonFinite(_) | Error::Training(_) | Error::SingleClass(_) => 5,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let message = err.to_string().replace('\n', " ");
            eprintln!("error kind={} message={}", err.kind(), serde_json::Value::String(message));
            ExitCode::from(exit_code(&err))
        }
    }
}
