use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::ExperimentError;
use crate::baselines::VOCAB_SIZES;
use crate::extract::ChunkingConfig;
use crate::linear::TrainConfig;
use crate::scorer::MockNoise;

pub const DEFAULT_FRACTIONS: [f64; 7] = [0.01, 0.02, 0.05, 0.1, 0.25, 0.5, 1.0];
pub const DEFAULT_ABLATION_REPEATS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum FeatureKind {
    Binary,
    Continuous,
}

/// One inferred-feature configuration: binary or continuous values, with or
/// without the custom queries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Variant {
    pub kind: FeatureKind,
    pub custom: bool,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant { kind: FeatureKind::Binary, custom: true },
        Variant { kind: FeatureKind::Continuous, custom: true },
        Variant { kind: FeatureKind::Binary, custom: false },
        Variant { kind: FeatureKind::Continuous, custom: false },
    ];

    pub fn continuous() -> Self {
        Variant { kind: FeatureKind::Continuous, custom: true }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            FeatureKind::Binary => "binary",
            FeatureKind::Continuous => "continuous",
        };
        let custom = if self.custom { "with-custom" } else { "without-custom" };
        write!(f, "{kind}-{custom}")
    }
}

impl FromStr for Variant {
    type Err = String;

    /// Accepts `binary`/`continuous` (custom queries included) or the full
    /// `<kind>-with-custom` / `<kind>-without-custom` form.
    fn from_str(s: &str) -> Result<Self, String> {
        let (kind, rest) = if let Some(rest) = s.strip_prefix("binary") {
            (FeatureKind::Binary, rest)
        } else if let Some(rest) = s.strip_prefix("continuous") {
            (FeatureKind::Continuous, rest)
        } else {
            return Err(format!("unknown variant {s:?}"));
        };
        let custom = match rest {
            "" | "-with-custom" => true,
            "-without-custom" => false,
            _ => return Err(format!("unknown variant {s:?}")),
        };
        Ok(Variant { kind, custom })
    }
}

impl TryFrom<String> for Variant {
    type Error = String;

    fn try_from(s: String) -> Result<Self, String> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Baselines {
    pub ground_truth: bool,
    pub tfidf: Vec<usize>,
    pub zero_shot: bool,
}

impl Default for Baselines {
    fn default() -> Self {
        Baselines {
            ground_truth: true,
            tfidf: VOCAB_SIZES.to_vec(),
            zero_shot: true,
        }
    }
}

/// Experiment settings, usually read from a TOML file. Relative paths are
/// resolved against the file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: PathBuf,
    pub queries: PathBuf,
    pub downstream_queries: Option<PathBuf>,
    /// `mock:<lexicon.json>` or `http:<url>`.
    pub scorer: String,
    #[serde(skip_serializing)]
    pub output_dir: PathBuf,
    /// Feature cache; defaults to `<output_dir>/cache/features.csv`.
    #[serde(skip_serializing)]
    pub cache: Option<PathBuf>,
    /// Seeds training, bootstrap resampling, subsampling, and ablation orders.
    pub seed: u64,
    pub chunking: ChunkingConfig,
    pub train: TrainConfig,
    pub variants: Vec<Variant>,
    pub baselines: Baselines,
    pub bootstrap_resamples: usize,
    pub fractions: Vec<f64>,
    pub ablation_repeats: usize,
    pub ablation_variant: Variant,
    /// Gaussian noise on the mock scorer's `logprob_yes`.
    pub noise: Option<MockNoise>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: PathBuf::new(),
            queries: PathBuf::new(),
            downstream_queries: None,
            scorer: String::new(),
            output_dir: PathBuf::from("out"),
            cache: None,
            seed: 0,
            chunking: ChunkingConfig::default(),
            train: TrainConfig::default(),
            variants: Variant::ALL.to_vec(),
            baselines: Baselines::default(),
            bootstrap_resamples: crate::eval::DEFAULT_RESAMPLES,
            fractions: DEFAULT_FRACTIONS.to_vec(),
            ablation_repeats: DEFAULT_ABLATION_REPEATS,
            ablation_variant: Variant::continuous(),
            noise: None,
            base_dir: PathBuf::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(content: &str, base_dir: &Path) -> Result<Self, ExperimentError> {
        let mut cfg: ExperimentConfig =
            toml::from_str(content).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.base_dir = base_dir.to_path_buf();
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let content = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: path.display().to_string(),
            source,
        })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&content, base).map_err(|e| match e {
            ExperimentError::Config(m) => ExperimentError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn cache_path(&self) -> PathBuf {
        match &self.cache {
            Some(c) => self.resolve(c),
            None => self.output_path().join("cache").join("features.csv"),
        }
    }

    /// The scorer spec with a `mock:` lexicon path made absolute.
    pub fn scorer_spec(&self) -> String {
        match self.scorer.strip_prefix("mock:") {
            Some(p) => format!("mock:{}", self.resolve(Path::new(p)).display()),
            None => self.scorer.clone(),
        }
    }

    /// Training settings with the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.train.clone()
        }
    }

    /// Fractions sorted ascending, duplicates removed.
    pub fn sorted_fractions(&self) -> Vec<f64> {
        let mut f = self.fractions.clone();
        f.sort_by(f64::total_cmp);
        f.dedup();
        f
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let fail = |m: String| Err(ExperimentError::Config(m));
        if self.variants.is_empty() {
            return fail("variants must not be empty".into());
        }
        if self.scorer.is_empty() {
            return fail("scorer is required".into());
        }
        if self.fractions.iter().any(|&f| !(f > 0.0 && f <= 1.0)) {
            return fail("fractions must lie in (0, 1]".into());
        }
        if self.baselines.tfidf.contains(&0) {
            return fail("TF-IDF vocabulary sizes must be positive".into());
        }
        if self.noise.is_some() && !self.scorer.starts_with("mock:") {
            return fail("noise applies only to the mock scorer".into());
        }
        self.train.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        self.chunking.validate().map_err(|e| ExperimentError::Config(e.to_string()))?;
        let mut required = vec![&self.dataset, &self.queries];
        required.extend(self.downstream_queries.as_ref());
        for p in required {
            if !self.resolve(p).is_file() {
                return fail(format!("{} does not exist", self.resolve(p).display()));
            }
        }
        Ok(())
    }
}
