//! `chill`: batch entry point for extraction, training, evaluation, the
//! experiment studies, the HTTP service, and the synthetic corpus.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 scorer or backend error.

use std::fmt;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use chill_core::data::{load_dataset, load_queries, DataError, Split};
use chill_core::eval::{auroc_report, EvalError, DEFAULT_RESAMPLES};
use chill_core::experiments::{
    derive_seed, variant_features, AblationMode, Experiment, ExperimentConfig, ExperimentError, FeatureKind, Study,
    Variant,
};
use chill_core::extract::{ChunkingConfig, ExtractError, ExtractOptions, Extractor, FeatureMatrix};
use chill_core::linear::{self, LinearModel, TrainConfig, TrainError};
use chill_core::scorer::{open_scorer, ScorerError};
use chill_core::synth::{self, SynthConfig};
use chill_service::{Service, ServiceError, ServiceOptions, SessionInit};
use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "chill", version, about = "Query-defined LLM features and interpretable linear models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Scorer backend: `mock:<lexicon.json>` or `http:<url>`.
    #[arg(long, global = true, env = "CHILL_SCORER")]
    scorer: Option<String>,
    /// Seed for every random choice (training order, bootstrap, subsampling, ablation).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Experiment config (TOML; keys mirror the experiment settings).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Print errors to stderr as JSON.
    #[arg(long, global = true)]
    json_errors: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Score every (document, query) pair into a feature file.
    Extract {
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        /// Feature CSV; also serves as the resumable cache.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one task's linear model on a feature file.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        task: String,
        /// binary | continuous, optionally suffixed -with-custom / -without-custom.
        #[arg(long, default_value = "continuous")]
        variant: Variant,
        /// Needed to tell custom queries apart for `-without-custom` variants.
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test-split AUROC with a bootstrap interval for a trained model.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long, default_value = "continuous")]
        variant: Variant,
        #[arg(long, default_value = "test")]
        split: String,
        #[arg(long)]
        resamples: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Downstream AUROC for every method and task.
    Grid(StudyArgs),
    /// AUROC against training-set fraction.
    Curve(StudyArgs),
    /// AUROC as features are pruned.
    Ablate {
        #[command(flatten)]
        study: StudyArgs,
        /// random | magnitude
        #[arg(long, default_value = "magnitude")]
        mode: AblationMode,
    },
    /// Per-query agreement of extracted features with reference indicators.
    Fidelity(StudyArgs),
    /// Run the HTTP service.
    Serve {
        /// State directory; created on first start.
        #[arg(long)]
        state: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        downstream_queries: Option<PathBuf>,
        /// Shared bearer token required on every endpoint but /health.
        #[arg(long, env = "CHILL_SERVICE_TOKEN", hide_env_values = true)]
        token: Option<String>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Write the synthetic corpus, lexicon, ground truth, and experiment config.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
    },
}

#[derive(Debug, Args)]
struct StudyArgs {
    /// Output directory; overrides the config's.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
    Backend(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Backend(_) => 3,
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            Failure::Usage(_) => "usage",
            Failure::Data(_) => "data",
            Failure::Backend(_) => "backend",
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Backend(m) => m,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.message())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ScorerError> for Failure {
    fn from(e: ScorerError) -> Self {
        Failure::Backend(e.to_string())
    }
}

impl From<ExtractError> for Failure {
    fn from(e: ExtractError) -> Self {
        match e {
            ExtractError::Scorer { .. } => Failure::Backend(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        match e {
            ExperimentError::Config(m) => Failure::Usage(m),
            ExperimentError::Scorer(s) => s.into(),
            ExperimentError::Extract(x) => x.into(),
            other => Failure::Data(other.to_string()),
        }
    }
}

impl From<ServiceError> for Failure {
    fn from(e: ServiceError) -> Self {
        match e {
            ServiceError::Bind { .. } | ServiceError::Scorer(_) => Failure::Backend(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn io_failure(path: &Path, e: std::io::Error) -> Failure {
    Failure::Data(format!("{}: {e}", path.display()))
}

fn write_output(out: Option<&Path>, content: &str) -> Result<(), Failure> {
    match out {
        Some(path) => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).map_err(|e| io_failure(dir, e))?;
            }
            std::fs::write(path, content).map_err(|e| io_failure(path, e))
        }
        None => {
            print!("{content}");
            Ok(())
        }
    }
}

struct Settings {
    config: Option<ExperimentConfig>,
    scorer: Option<String>,
    seed: Option<u64>,
}

impl Settings {
    fn new(cli: &Cli) -> Result<Self, Failure> {
        let config = match &cli.config {
            Some(path) => Some(ExperimentConfig::load(path)?),
            None => None,
        };
        Ok(Settings {
            config,
            scorer: cli.scorer.clone(),
            seed: cli.seed,
        })
    }

    /// A flag value, else the config's (resolved against its directory).
    fn path(&self, flag: &Option<PathBuf>, from_config: impl Fn(&ExperimentConfig) -> Option<&PathBuf>, name: &str) -> Result<PathBuf, Failure> {
        if let Some(p) = flag {
            return Ok(p.clone());
        }
        self.config
            .as_ref()
            .and_then(|c| from_config(c).filter(|p| !p.as_os_str().is_empty()).map(|p| c.resolve(p)))
            .ok_or_else(|| Failure::Usage(format!("--{name} is required (or set it in --config)")))
    }

    fn scorer_spec(&self) -> Result<String, Failure> {
        if let Some(s) = &self.scorer {
            return Ok(s.clone());
        }
        self.config
            .as_ref()
            .filter(|c| !c.scorer.is_empty())
            .map(ExperimentConfig::scorer_spec)
            .ok_or_else(|| Failure::Usage("--scorer is required (or set it in --config)".into()))
    }

    fn chunking(&self) -> ChunkingConfig {
        self.config.as_ref().map(|c| c.chunking).unwrap_or_default()
    }

    fn seed(&self) -> u64 {
        self.seed.or(self.config.as_ref().map(|c| c.seed)).unwrap_or(0)
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed(),
            ..self.config.as_ref().map(|c| c.train.clone()).unwrap_or_default()
        }
    }

    /// The experiment config with command-line overrides applied.
    fn experiment(&self, out: &Option<PathBuf>) -> Result<ExperimentConfig, Failure> {
        let mut cfg = self
            .config
            .clone()
            .ok_or_else(|| Failure::Usage("this command needs --config <experiment.toml>".into()))?;
        if let Some(s) = &self.scorer {
            cfg.scorer = s.clone();
        }
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(out) = out {
            cfg.output_dir = std::path::absolute(out).unwrap_or_else(|_| out.clone());
        }
        Ok(cfg)
    }
}

fn model_matrix(features: &FeatureMatrix, model: &LinearModel, variant: Variant) -> Result<FeatureMatrix, Failure> {
    let m = features.select_columns(&model.query_ids)?;
    Ok(match variant.kind {
        FeatureKind::Continuous => m,
        FeatureKind::Binary => m.binarized(),
    })
}

fn run_study(settings: &Settings, out: &Option<PathBuf>, study: Study) -> Result<(), Failure> {
    let cfg = settings.experiment(out)?;
    let exp = Experiment::open(cfg)?;
    let output = exp.run_study(study)?;
    if let Some((_, content)) = output.files.iter().find(|(rel, _)| rel == "grid.json") {
        let failed = serde_json::from_str::<serde_json::Value>(content)
            .ok()
            .and_then(|v| v["rows"].as_array().map(|rows| rows.iter().filter(|r| !r["error"].is_null()).count()))
            .unwrap_or(0);
        if failed > 0 {
            log::warn!("{failed} grid rows failed; see their error fields");
        }
    }
    let summary = serde_json::json!({
        "output_dir": exp.config.output_path(),
        "outputs": output.manifest.outputs,
    });
    println!("{}", serde_json::to_string_pretty(&summary).expect("summary serializes"));
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let settings = Settings::new(cli)?;
    match &cli.command {
        Command::Synth { out, n_train, n_test } => {
            let defaults = SynthConfig::default();
            let cfg = SynthConfig {
                seed: cli.seed.unwrap_or(defaults.seed),
                n_train: n_train.unwrap_or(defaults.n_train),
                n_test: n_test.unwrap_or(defaults.n_test),
                ..defaults
            };
            synth::generate(&cfg).write(out).map_err(|e| io_failure(out, e))?;
            println!("wrote synthetic corpus (seed {}) to {}", cfg.seed, out.display());
            Ok(())
        }
        Command::Extract { dataset, queries, out } => {
            let dataset = load_dataset(settings.path(dataset, |c| Some(&c.dataset), "dataset")?)?;
            let queries = load_queries(settings.path(queries, |c| Some(&c.queries), "queries")?)?;
            dataset.check_queries(&queries)?;
            let scorer = open_scorer(&settings.scorer_spec()?)?;
            let m = Extractor::new(scorer.as_ref(), settings.chunking()).run(
                &dataset,
                &queries,
                ExtractOptions {
                    cache: Some(out),
                    progress: None,
                },
            )?;
            eprintln!("extracted {} documents x {} queries to {}", m.n_rows(), m.n_cols(), out.display());
            Ok(())
        }
        Command::Train {
            features,
            dataset,
            task,
            variant,
            queries,
            out,
        } => {
            let dataset = load_dataset(settings.path(dataset, |c| Some(&c.dataset), "dataset")?)?;
            let features = FeatureMatrix::load(features)?;
            let queries = match (queries, variant.custom) {
                (Some(p), _) => load_queries(p)?,
                (None, false) => load_queries(settings.path(&None, |c| Some(&c.queries), "queries")?)?,
                (None, true) => chill_core::data::QuerySet {
                    name: String::new(),
                    downstream: false,
                    queries: Vec::new(),
                },
            };
            let m = if queries.is_empty() {
                let m = features.clone();
                match variant.kind {
                    FeatureKind::Continuous => m,
                    FeatureKind::Binary => m.binarized(),
                }
            } else {
                variant_features(&features, &queries, *variant)?
            };
            let model = linear::train_task(&m, &dataset, task, &settings.train_config())?;
            write_output(out.as_deref(), &model.to_json())
        }
        Command::Eval {
            model,
            features,
            dataset,
            variant,
            split,
            resamples,
            out,
        } => {
            let split = match split.as_str() {
                "train" => Split::Train,
                "test" => Split::Test,
                other => return Err(Failure::Usage(format!("--split must be train or test, got {other:?}"))),
            };
            let dataset = load_dataset(settings.path(dataset, |c| Some(&c.dataset), "dataset")?)?;
            let content = std::fs::read_to_string(model).map_err(|e| io_failure(model, e))?;
            let model = LinearModel::from_json(&content)?;
            let m = model_matrix(&FeatureMatrix::load(features)?, &model, *variant)?;
            let (rows, labels) = linear::task_rows(&m, &dataset, &model.task, split)?;
            let scores = linear::predict_proba(&model, &rows)?;
            let resamples = resamples
                .or(settings.config.as_ref().map(|c| c.bootstrap_resamples))
                .unwrap_or(DEFAULT_RESAMPLES);
            let seed = derive_seed(settings.seed(), &["bootstrap", &model.task]);
            let report = auroc_report(&scores, &labels, resamples, seed).with_label(&model.task);
            let mut json = serde_json::to_string_pretty(&report).expect("report serializes");
            json.push('\n');
            write_output(out.as_deref(), &json)
        }
        Command::Grid(args) => run_study(&settings, &args.out, Study::Grid),
        Command::Curve(args) => run_study(&settings, &args.out, Study::Curve),
        Command::Ablate { study, mode } => run_study(&settings, &study.out, Study::Ablation(*mode)),
        Command::Fidelity(args) => run_study(&settings, &args.out, Study::Fidelity),
        Command::Serve {
            state,
            bind,
            dataset,
            queries,
            downstream_queries,
            token,
            workers,
        } => {
            let init = if state.join(chill_service::SESSION_FILE).exists() {
                None
            } else {
                Some(SessionInit {
                    dataset: settings.path(dataset, |c| Some(&c.dataset), "dataset")?,
                    queries: settings.path(queries, |c| Some(&c.queries), "queries")?,
                    scorer: settings.scorer_spec()?,
                    downstream_queries: match downstream_queries {
                        Some(p) => Some(p.clone()),
                        None => settings
                            .config
                            .as_ref()
                            .and_then(|c| c.downstream_queries.as_ref().map(|p| c.resolve(p))),
                    },
                    seed: settings.seed(),
                    chunking: settings.chunking(),
                })
            };
            let service = Service::open(
                state,
                init,
                ServiceOptions {
                    token: token.clone(),
                    workers: *workers,
                    scorer: None,
                },
            )?;
            let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Backend(e.to_string()))?;
            runtime.block_on(chill_service::serve(*bind, Arc::clone(&service)))?;
            Ok(())
        }
    }
}

fn report(failure: &Failure, json: bool) {
    if json {
        let body = serde_json::json!({
            "error": {"kind": failure.kind(), "message": failure.message(), "exit_code": failure.code()}
        });
        eprintln!("{body}");
    } else {
        eprintln!("error: {failure}");
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            if std::env::args().any(|a| a == "--json-errors") {
                report(&Failure::Usage(e.render().to_string()), true);
            } else {
                let _ = e.print();
            }
            return ExitCode::from(1);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            report(&failure, cli.json_errors);
            ExitCode::from(failure.code())
        }
    }
}
