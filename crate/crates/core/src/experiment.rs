//! Experiment configuration, artifact layout and the end-to-end runner.
//!
//! All randomness flows from the root `seed`: the corpus, holdout and
//! training seeds are derived from it by label. Every treatment shares the
//! corpus, the holdout split, the window size, the epoch count and the
//! initial parameters; only the epoch plan differs.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::corpus::{
    self, build_test_suite, generate_corpus, CatalogSpec, CorpusError, GeneratorConfig, HoldoutConfig,
    LengthDistribution, SimilaritySets, TestSuite, UserHistory,
};
use crate::eval::{self, EvalError, EvalReport, ReportMeta};
use crate::model::{ModelError, ModelParams};
use crate::seed;
use crate::training::{self, AdamHyper, TrainConfig, TrainError, TrainLog};
use crate::windowing::{self, CoverageReport, EpochPlan, Horizon};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid experiment config: {0}")]
    Config(String),
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {msg}")]
    Artifact { path: PathBuf, msg: String },
    #[error("unknown treatment {0:?}")]
    UnknownTreatment(String),
    #[error(transparent)]
    Corpus(#[from] CorpusError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    /// Every epoch uses the latest window.
    Control,
    /// Every epoch slides.
    AllSliding,
    /// Sliding epochs first, then `fixed_epochs` latest-window epochs.
    Mixed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Treatment {
    pub name: String,
    #[serde(default)]
    pub label: Option<String>,
    pub schedule: Schedule,
    #[serde(default)]
    pub horizon: Option<Horizon>,
    #[serde(default)]
    pub fixed_epochs: Option<usize>,
}

impl Treatment {
    pub fn display_name(&self) -> &str {
        self.label.as_deref().unwrap_or(&self.name)
    }

    /// `(X, H)` for an `n`-epoch run. Mixed schedules default to `X = ceil(n / 3)`.
    pub fn resolve(&self, n: usize) -> (usize, Horizon) {
        let horizon = self.horizon.unwrap_or(Horizon::Unbounded);
        match self.schedule {
            Schedule::Control => (n, horizon),
            Schedule::AllSliding => (0, horizon),
            Schedule::Mixed => (self.fixed_epochs.unwrap_or(n.div_ceil(3)), horizon),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusSettings {
    pub catalog: CatalogSpec,
    pub num_users: usize,
    pub history_length: LengthDistribution,
    pub pivot_fraction: f64,
    pub dirichlet_alpha: f64,
    #[serde(default)]
    pub recent_rank_shift: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub window: usize,
    pub batch_size: usize,
    #[serde(flatten)]
    pub adam: AdamHyper,
    pub dim: usize,
    #[serde(default)]
    pub decay_init: f64,
    pub init_scale: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSettings {
    pub k: usize,
    #[serde(default = "default_trials")]
    pub coverage_trials: usize,
}

fn default_trials() -> usize {
    3
}

fn default_baseline() -> String {
    "control".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusSettings,
    pub holdout: HoldoutConfig,
    pub train: TrainSettings,
    pub eval: EvalSettings,
    #[serde(default = "default_baseline")]
    pub baseline: String,
    pub treatments: Vec<Treatment>,
}

/// The bundled default configuration (`configs/default.toml`).
pub const DEFAULT_CONFIG: &str = include_str!("../../../configs/default.toml");

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self, ExperimentError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ExperimentError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ExperimentError> {
        let text = fs::read_to_string(path).map_err(|source| ExperimentError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => Self::from_json(&text),
            _ => Self::from_toml(&text),
        }
    }

    pub fn bundled_default() -> Self {
        Self::from_toml(DEFAULT_CONFIG).expect("bundled config is valid")
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.generator_config().validate()?;
        let mut names = BTreeSet::new();
        for t in &self.treatments {
            if !names.insert(t.name.as_str()) {
                return Err(ExperimentError::Config(format!("duplicate treatment name {:?}", t.name)));
            }
            if t.name.is_empty() || t.name.contains(['/', '\\']) {
                return Err(ExperimentError::Config(format!("treatment name {:?} is not a valid directory name", t.name)));
            }
            self.train_config(t).validate()?;
        }
        if !names.contains(self.baseline.as_str()) {
            return Err(ExperimentError::Config(format!(
                "baseline {:?} is not among the treatments",
                self.baseline
            )));
        }
        if self.eval.k == 0 {
            return Err(ExperimentError::Config("eval.k must be at least 1".into()));
        }
        if self.eval.coverage_trials == 0 {
            return Err(ExperimentError::Config("eval.coverage_trials must be at least 1".into()));
        }
        Ok(())
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        let c = &self.corpus;
        GeneratorConfig {
            catalog: c.catalog.clone(),
            num_users: c.num_users,
            history_length: c.history_length,
            pivot_fraction: c.pivot_fraction,
            dirichlet_alpha: c.dirichlet_alpha,
            recent_rank_shift: c.recent_rank_shift,
            seed: seed::derive_label(self.seed, "corpus"),
        }
    }

    pub fn holdout_seed(&self) -> u64 {
        seed::derive_label(self.seed, "holdout")
    }

    pub fn treatment(&self, name: &str) -> Result<&Treatment, ExperimentError> {
        self.treatments
            .iter()
            .find(|t| t.name == name)
            .ok_or_else(|| ExperimentError::UnknownTreatment(name.to_string()))
    }

    pub fn train_config(&self, t: &Treatment) -> TrainConfig {
        let s = &self.train;
        let (fixed_epochs, horizon) = t.resolve(s.epochs);
        TrainConfig {
            epochs: s.epochs,
            fixed_epochs,
            horizon,
            window: s.window,
            batch_size: s.batch_size,
            adam: s.adam,
            dim: s.dim,
            decay_init: s.decay_init,
            init_scale: s.init_scale,
            seed: seed::derive_label(self.seed, "train"),
        }
    }

    /// Identifies the corpus and holdout split.
    pub fn corpus_hash(&self) -> String {
        let doc = serde_json::json!({
            "seed": self.seed,
            "corpus": self.corpus,
            "holdout": self.holdout,
        });
        sha256_hex(doc.to_string().as_bytes())[..16].to_string()
    }

    /// Identifies one treatment's full configuration.
    pub fn config_hash(&self, t: &Treatment) -> String {
        let doc = serde_json::json!({
            "corpus": self.corpus_hash(),
            "train": self.train_config(t),
            "eval": self.eval,
            "treatment": t,
        });
        sha256_hex(doc.to_string().as_bytes())[..16].to_string()
    }

    pub fn report_meta(&self, t: &Treatment) -> ReportMeta {
        ReportMeta {
            model: t.display_name().to_string(),
            config_hash: self.config_hash(t),
            corpus_hash: self.corpus_hash(),
            seed: self.seed,
            window: self.train.window,
        }
    }

    pub fn plans(&self) -> Result<BTreeMap<String, EpochPlan>, ExperimentError> {
        self.treatments
            .iter()
            .map(|t| Ok((t.name.clone(), self.train_config(t).plan()?)))
            .collect()
    }
}

/// The generated corpus and its derived splits.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub corpus: Vec<UserHistory>,
    pub similarity: SimilaritySets,
    pub train: Vec<UserHistory>,
    pub suite: TestSuite,
    pub num_items: usize,
}

pub fn prepare(config: &ExperimentConfig) -> Result<Prepared, ExperimentError> {
    let generator = config.generator_config();
    let (corpus, similarity) = generate_corpus(&generator)?;
    split(config, corpus, similarity)
}

/// Applies the configured holdout split to a corpus.
pub fn split(
    config: &ExperimentConfig,
    corpus: Vec<UserHistory>,
    similarity: SimilaritySets,
) -> Result<Prepared, ExperimentError> {
    let (train, suite) = build_test_suite(
        &corpus,
        &config.holdout,
        config.corpus.pivot_fraction,
        config.holdout_seed(),
    )?;
    Ok(Prepared {
        corpus,
        similarity,
        train,
        suite,
        num_items: config.corpus.catalog.num_items,
    })
}

pub fn train_treatment(
    config: &ExperimentConfig,
    prepared: &Prepared,
    t: &Treatment,
) -> Result<(ModelParams, TrainLog), ExperimentError> {
    Ok(training::train(&prepared.train, prepared.num_items, &config.train_config(t))?)
}

pub fn evaluate_treatment(
    config: &ExperimentConfig,
    prepared: &Prepared,
    t: &Treatment,
    params: &ModelParams,
) -> Result<EvalReport, ExperimentError> {
    Ok(eval::evaluate(
        params,
        &prepared.suite,
        &prepared.similarity,
        config.eval.k,
        config.report_meta(t),
    )?)
}

pub fn coverage(config: &ExperimentConfig, prepared: &Prepared) -> Result<CoverageReport, ExperimentError> {
    Ok(windowing::coverage_stats(
        &prepared.train,
        &config.plans()?,
        config.train.window,
        seed::derive_label(config.seed, "coverage"),
        config.eval.coverage_trials,
    ))
}

/// One trained and evaluated treatment.
#[derive(Debug, Clone)]
pub struct TreatmentRun {
    pub treatment: Treatment,
    pub params: ModelParams,
    pub log: TrainLog,
    pub report: EvalReport,
}

/// Trains and evaluates every treatment without touching the filesystem.
pub fn run_in_memory(config: &ExperimentConfig) -> Result<(Prepared, Vec<TreatmentRun>), ExperimentError> {
    let prepared = prepare(config)?;
    let mut runs = Vec::with_capacity(config.treatments.len());
    for t in &config.treatments {
        let (params, log) = train_treatment(config, &prepared, t)?;
        let report = evaluate_treatment(config, &prepared, t, &params)?;
        log::info!(
            "{}: future MRR {:.5}, old ppl {:.3}, recall@{} {:.5}",
            t.name,
            report.future.mrr,
            report.old.perplexity,
            config.eval.k,
            report.embedding.recall_at_k
        );
        runs.push(TreatmentRun {
            treatment: t.clone(),
            params,
            log,
            report,
        });
    }
    Ok((prepared, runs))
}

/// Fixed artifact file names under an output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn corpus(&self) -> PathBuf {
        self.root.join("corpus.tsv")
    }
    pub fn similarity(&self) -> PathBuf {
        self.root.join("similar.json")
    }
    pub fn suite(&self) -> PathBuf {
        self.root.join("suite.json")
    }
    pub fn manifest(&self) -> PathBuf {
        self.root.join("manifest.json")
    }
    pub fn coverage(&self) -> PathBuf {
        self.root.join("coverage.csv")
    }
    pub fn comparison_md(&self) -> PathBuf {
        self.root.join("comparison.md")
    }
    pub fn comparison_csv(&self) -> PathBuf {
        self.root.join("comparison.csv")
    }
    pub fn treatment_dir(&self, name: &str) -> PathBuf {
        self.root.join(name)
    }
    pub fn model(&self, name: &str) -> PathBuf {
        self.treatment_dir(name).join("model.bin")
    }
    pub fn train_log(&self, name: &str) -> PathBuf {
        self.treatment_dir(name).join("trainlog.csv")
    }
    pub fn plan(&self, name: &str) -> PathBuf {
        self.treatment_dir(name).join("plan.json")
    }
    pub fn report(&self, name: &str) -> PathBuf {
        self.treatment_dir(name).join("eval.json")
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), ExperimentError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|source| ExperimentError::Write {
            path: parent.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, bytes).map_err(|source| ExperimentError::Write {
        path: path.to_path_buf(),
        source,
    })
}

fn read_file(path: &Path) -> Result<String, ExperimentError> {
    fs::read_to_string(path).map_err(|source| ExperimentError::Read {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Debug, Serialize, Deserialize)]
struct SuiteDoc {
    corpus_hash: String,
    #[serde(flatten)]
    suite: TestSuite,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    corpus_hash: String,
    config: ExperimentConfig,
    treatments: BTreeMap<String, String>,
}

/// `gen`: corpus.tsv, similar.json, suite.json and manifest.json.
pub fn write_generated(config: &ExperimentConfig, layout: &Layout) -> Result<Prepared, ExperimentError> {
    let prepared = prepare(config)?;
    let mut corpus_bytes = Vec::new();
    corpus::write_corpus_to(&prepared.corpus, &mut corpus_bytes).expect("in-memory write");
    write_file(&layout.corpus(), corpus_bytes)?;
    write_file(&layout.similarity(), prepared.similarity.to_json())?;
    let doc = SuiteDoc {
        corpus_hash: config.corpus_hash(),
        suite: prepared.suite.clone(),
    };
    write_file(&layout.suite(), serde_json::to_string(&doc).expect("suite serializes"))?;
    let manifest = Manifest {
        corpus_hash: config.corpus_hash(),
        config: config.clone(),
        treatments: config
            .treatments
            .iter()
            .map(|t| (t.name.clone(), config.config_hash(t)))
            .collect(),
    };
    write_file(
        &layout.manifest(),
        serde_json::to_string_pretty(&manifest).expect("manifest serializes"),
    )?;
    Ok(prepared)
}

/// Reloads the corpus written by `gen` and re-derives the training split.
/// Fails if the stored suite belongs to a different corpus configuration.
pub fn load_prepared(config: &ExperimentConfig, layout: &Layout) -> Result<Prepared, ExperimentError> {
    let corpus_path = layout.corpus();
    if !corpus_path.exists() {
        return Err(ExperimentError::Artifact {
            path: corpus_path,
            msg: "missing corpus; run `gen` first".into(),
        });
    }
    let corpus = corpus::read_corpus(&corpus_path)?;
    let similarity = SimilaritySets::from_json(&read_file(&layout.similarity())?)?;
    let suite_path = layout.suite();
    let doc: SuiteDoc = serde_json::from_str(&read_file(&suite_path)?).map_err(|e| ExperimentError::Artifact {
        path: suite_path.clone(),
        msg: e.to_string(),
    })?;
    if doc.corpus_hash != config.corpus_hash() {
        return Err(ExperimentError::Artifact {
            path: suite_path,
            msg: format!(
                "built for corpus {} but the config describes corpus {}",
                doc.corpus_hash,
                config.corpus_hash()
            ),
        });
    }
    let prepared = split(config, corpus, similarity)?;
    if prepared.suite != doc.suite {
        return Err(ExperimentError::Artifact {
            path: suite_path,
            msg: "test suite does not match the corpus holdout split".into(),
        });
    }
    Ok(prepared)
}

pub fn write_trained(
    config: &ExperimentConfig,
    prepared: &Prepared,
    t: &Treatment,
    layout: &Layout,
) -> Result<(ModelParams, TrainLog), ExperimentError> {
    let (params, log) = train_treatment(config, prepared, t)?;
    write_file(&layout.model(&t.name), params.to_bytes())?;
    let mut csv = Vec::new();
    log.write_csv(&mut csv).expect("in-memory write");
    write_file(&layout.train_log(&t.name), csv)?;
    write_file(&layout.plan(&t.name), config.train_config(t).plan()?.to_json())?;
    Ok((params, log))
}

pub fn load_model(path: &Path) -> Result<ModelParams, ExperimentError> {
    if !path.exists() {
        return Err(ExperimentError::Artifact {
            path: path.to_path_buf(),
            msg: "model file not found".into(),
        });
    }
    ModelParams::load(path).map_err(|e| ExperimentError::Artifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

pub fn write_report(layout: &Layout, t: &Treatment, report: &EvalReport) -> Result<(), ExperimentError> {
    write_file(&layout.report(&t.name), report.to_json())
}

pub fn write_coverage(layout: &Layout, report: &CoverageReport) -> Result<(), ExperimentError> {
    let mut csv = Vec::new();
    report.write_csv(&mut csv).expect("in-memory write");
    write_file(&layout.coverage(), csv)
}

pub fn load_report(path: &Path) -> Result<EvalReport, ExperimentError> {
    serde_json::from_str(&read_file(path)?).map_err(|e| ExperimentError::Artifact {
        path: path.to_path_buf(),
        msg: e.to_string(),
    })
}

/// `compare`: reads each treatment's eval.json and writes the comparison
/// table. Reports whose config hash differs from the current config are refused.
pub fn write_comparison(config: &ExperimentConfig, layout: &Layout) -> Result<eval::ComparisonTable, ExperimentError> {
    let mut control = None;
    let mut treatments = Vec::new();
    for t in &config.treatments {
        let path = layout.report(&t.name);
        let report = load_report(&path)?;
        if report.meta.config_hash != config.config_hash(t) {
            return Err(ExperimentError::Artifact {
                path,
                msg: format!(
                    "report has config hash {} but the config gives {}",
                    report.meta.config_hash,
                    config.config_hash(t)
                ),
            });
        }
        if t.name == config.baseline {
            control = Some(report);
        } else {
            treatments.push(report);
        }
    }
    let control = control.expect("baseline validated");
    let table = eval::compare(&control, &treatments)?;
    write_file(&layout.comparison_md(), table.to_markdown())?;
    let mut csv = Vec::new();
    table.write_csv(&mut csv).expect("in-memory write");
    write_file(&layout.comparison_csv(), csv)?;
    Ok(table)
}

/// `run-all`: every stage for every treatment.
pub fn run_all(config: &ExperimentConfig, layout: &Layout) -> Result<eval::ComparisonTable, ExperimentError> {
    let prepared = write_generated(config, layout)?;
    for t in &config.treatments {
        log::info!("training {}", t.name);
        let (params, log) = write_trained(config, &prepared, t, layout)?;
        log::info!("{}:\n{log}", t.name);
        let report = evaluate_treatment(config, &prepared, t, &params)?;
        write_report(layout, t, &report)?;
    }
    write_coverage(layout, &coverage(config, &prepared)?)?;
    write_comparison(config, layout)
}
