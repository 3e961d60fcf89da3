//! File-backed stages driven by a TOML run configuration.
//!
//! Each stage reads the artifacts of its prerequisites from the output
//! directory and writes its own with write-then-rename. An artifact that
//! already exists is left alone when the new bytes are identical and
//! replaced only with `force`. A lock file keeps a second writer out.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{Duration, Instant};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::align::{AlignConfig, AlignHistory, AlignmentNetwork};
use crate::cf::{CfConfig, CfModel};
use crate::checkpoint::Checkpoint;
use crate::cot::{
    filter_cots, load_cot_fixture, load_cot_records, load_explanation_fixture, render_cot_records,
    threshold_sweep, CotRecord, FixtureAdapter, GenerationAdapter, HttpTransport, RemoteAdapter,
    SweepReport,
};
use crate::data::{
    build_sequences, filter_dataset, leave_one_out_split, load_interactions, load_user_item_texts,
    partition_cold_warm, render_catalog, CatalogEntry, ColdWarmPartition, ItemId, SplitDataset,
    UserId, DEFAULT_COLD_WARM_FRACTION, DEFAULT_MIN_ITEM_POPULARITY, DEFAULT_MIN_USER_EVENTS,
};
use crate::error::{Error, Result};
use crate::eval::{
    cold_warm_report, evaluate_split, zero_shot_eval, EvalSetup, Explainer, MetricReport,
    DEFAULT_POOL_SIZE,
};
use crate::pipeline::{
    cf_scores, cot_requests, cot_signals, generate_cots, train_align_stage, train_cf_stage,
    train_proj_stage, CotConfig, Pipeline, PipelineExplainer,
};
use crate::projection::{ProjectionConfig, ProjectionHistory, ProjectionStack};
use crate::semantic::{load_embeddings, FallbackEmbedder, SemanticStore};
use crate::tsv;

pub const LOCK_FILE: &str = ".xrec.lock";

pub mod artifact {
    pub const SEQUENCES: &str = "sequences.tsv";
    pub const SPLIT: &str = "split.json";
    pub const PARTITION: &str = "partition.json";
    pub const CATALOG: &str = "catalog.tsv";
    pub const SEMANTIC: &str = "semantic.tsv";
    pub const PREPARE: &str = "prepare.json";
    pub const CF: &str = "cf.ckpt";
    pub const CF_REPORT: &str = "cf.json";
    pub const ALIGN: &str = "align.ckpt";
    pub const ALIGN_REPORT: &str = "align.json";
    pub const COTS: &str = "cots.jsonl";
    pub const COT_REPORT: &str = "cot.json";
    pub const PROJECTION: &str = "projection.ckpt";
    pub const PROJECTION_REPORT: &str = "projection.json";
    pub const EVAL: &str = "eval.json";
    pub const COLD_WARM: &str = "cold_warm.json";
    pub const ZERO_SHOT: &str = "zero_shot.json";
    pub const SWEEP: &str = "sweep.tsv";
    pub const SWEEP_REPORT: &str = "sweep.json";
    pub const REPORT: &str = "report.json";
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    pub interactions: Option<PathBuf>,
    pub catalog: Option<PathBuf>,
    /// Precomputed item text embeddings; missing items fall back to the
    /// hashed embedder.
    pub embeddings: Option<PathBuf>,
    /// Review summaries used as explanation references.
    pub reviews: Option<PathBuf>,
    pub cot_fixture: Option<PathBuf>,
    pub explanation_fixture: Option<PathBuf>,
    pub out: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        Self {
            interactions: None,
            catalog: None,
            embeddings: None,
            reviews: None,
            cot_fixture: None,
            explanation_fixture: None,
            out: PathBuf::from("out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub min_user_events: usize,
    pub min_item_popularity: usize,
    pub cold_warm_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            min_user_events: DEFAULT_MIN_USER_EVENTS,
            min_item_popularity: DEFAULT_MIN_ITEM_POPULARITY,
            cold_warm_fraction: DEFAULT_COLD_WARM_FRACTION,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    Fixture,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenerationConfig {
    pub mode: GenerationMode,
    /// Expand templates for pairs missing from the fixture files.
    pub synthesize: bool,
    pub good_percent: u64,
    pub endpoint: Option<String>,
    pub timeout_secs: u64,
    pub retries: usize,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        Self {
            mode: GenerationMode::Fixture,
            synthesize: false,
            good_percent: 80,
            endpoint: None,
            timeout_secs: 60,
            retries: 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub ks: Vec<usize>,
    pub pool_size: usize,
    /// Request explanations when review references are available.
    pub explanations: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10, 20],
            pool_size: DEFAULT_POOL_SIZE,
            explanations: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub thresholds: Vec<f64>,
    /// Retrain the projections and evaluate at every threshold.
    pub downstream: bool,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            thresholds: (0..10).map(|i| i as f64 / 10.0).collect(),
            downstream: false,
        }
    }
}

/// A second domain evaluated with the frozen models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ZeroShotConfig {
    pub interactions: PathBuf,
    pub catalog: PathBuf,
    #[serde(default)]
    pub embeddings: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub paths: PathsConfig,
    pub data: DataConfig,
    pub cf: CfConfig,
    pub align: AlignConfig,
    pub cot: CotConfig,
    pub projection: ProjectionConfig,
    pub generation: GenerationConfig,
    pub eval: EvalConfig,
    pub sweep: SweepConfig,
    pub zero_shot: Option<ZeroShotConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            paths: PathsConfig::default(),
            data: DataConfig::default(),
            cf: CfConfig::default(),
            align: AlignConfig::default(),
            cot: CotConfig::default(),
            projection: ProjectionConfig::default(),
            generation: GenerationConfig::default(),
            eval: EvalConfig::default(),
            sweep: SweepConfig::default(),
            zero_shot: None,
        }
    }
}

fn resolve(base: &Path, p: &mut PathBuf) {
    if p.is_relative() {
        *p = base.join(&*p);
    }
}

impl RunConfig {
    /// Parses TOML; sections and dotted keys are equivalent. Relative paths
    /// are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut config: RunConfig = toml::from_str(text).map_err(|e| {
            let field = e
                .message()
                .split('`')
                .nth(1)
                .unwrap_or("config")
                .to_string();
            Error::config(field, e.message().trim())
        })?;
        config.resolve_paths(base);
        Ok(config)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, base)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let p = &mut self.paths;
        for slot in [
            &mut p.interactions,
            &mut p.catalog,
            &mut p.embeddings,
            &mut p.reviews,
            &mut p.cot_fixture,
            &mut p.explanation_fixture,
        ]
        .into_iter()
        .flatten()
        {
            resolve(base, slot);
        }
        resolve(base, &mut p.out);
        if let Some(z) = &mut self.zero_shot {
            resolve(base, &mut z.interactions);
            resolve(base, &mut z.catalog);
            if let Some(e) = &mut z.embeddings {
                resolve(base, e);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        let p = &self.paths;
        let inputs = [
            ("paths.interactions", &p.interactions),
            ("paths.catalog", &p.catalog),
            ("paths.embeddings", &p.embeddings),
            ("paths.reviews", &p.reviews),
            ("paths.cot_fixture", &p.cot_fixture),
            ("paths.explanation_fixture", &p.explanation_fixture),
        ];
        for (field, path) in inputs {
            if let Some(path) = path {
                if !path.is_file() {
                    return Err(Error::config(
                        field,
                        format!("{} does not exist", path.display()),
                    ));
                }
            }
        }
        if let Some(z) = &self.zero_shot {
            for (field, path) in [
                ("zero_shot.interactions", Some(&z.interactions)),
                ("zero_shot.catalog", Some(&z.catalog)),
                ("zero_shot.embeddings", z.embeddings.as_ref()),
            ] {
                if let Some(path) = path {
                    if !path.is_file() {
                        return Err(Error::config(
                            field,
                            format!("{} does not exist", path.display()),
                        ));
                    }
                }
            }
        }
        if self.data.min_user_events < 3 {
            return Err(Error::config("data.min_user_events", "must be at least 3"));
        }
        if !(self.data.cold_warm_fraction > 0.0 && self.data.cold_warm_fraction <= 0.5) {
            return Err(Error::config(
                "data.cold_warm_fraction",
                "must lie in (0, 0.5]",
            ));
        }
        self.cf.validate()?;
        self.align.validate()?;
        self.cot.validate()?;
        self.projection.validate()?;
        if self.generation.good_percent > 100 {
            return Err(Error::config(
                "generation.good_percent",
                "must lie in [0, 100]",
            ));
        }
        if self.generation.mode == GenerationMode::Remote && self.generation.endpoint.is_none() {
            return Err(Error::config(
                "generation.endpoint",
                "required in remote mode",
            ));
        }
        self.eval_setup().validate()?;
        let t = &self.sweep.thresholds;
        if t.is_empty() {
            return Err(Error::config("sweep.thresholds", "must not be empty"));
        }
        if t.iter().any(|x| !(0.0..=1.0).contains(x)) {
            return Err(Error::config(
                "sweep.thresholds",
                "each threshold must lie in [0, 1]",
            ));
        }
        if t.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::config(
                "sweep.thresholds",
                "must be sorted ascending",
            ));
        }
        Ok(())
    }

    /// SHA-256 over the canonical JSON form, output directory excluded so
    /// that the same inputs give the same digest wherever they are written.
    pub fn digest(&self) -> String {
        let mut c = self.clone();
        c.paths.out = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serialises");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    fn eval_setup(&self) -> EvalSetup {
        EvalSetup {
            ks: self.eval.ks.clone(),
            pool_size: self.eval.pool_size,
            seed: self.seed,
            config_digest: self.digest(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Prepare,
    TrainCf,
    TrainAlign,
    Cot,
    TrainProj,
    Eval,
    Sweep,
    Report,
}

impl Stage {
    pub const ALL: [Stage; 8] = [
        Stage::Prepare,
        Stage::TrainCf,
        Stage::TrainAlign,
        Stage::Cot,
        Stage::TrainProj,
        Stage::Eval,
        Stage::Sweep,
        Stage::Report,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::Prepare => "prepare",
            Stage::TrainCf => "train-cf",
            Stage::TrainAlign => "train-align",
            Stage::Cot => "cot",
            Stage::TrainProj => "train-proj",
            Stage::Eval => "eval",
            Stage::Sweep => "sweep",
            Stage::Report => "report",
        }
    }
}

/// Removes the lock file when dropped.
struct Lock(PathBuf);

impl Lock {
    fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOCK_FILE);
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
        {
            Ok(_) => Ok(Lock(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for Lock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

#[derive(Serialize, Deserialize)]
struct Stamped<T> {
    stage: String,
    seed: u64,
    config_digest: String,
    #[serde(flatten)]
    body: T,
}

#[derive(Serialize, Deserialize)]
struct PrepareBody {
    events_loaded: usize,
    events_kept: usize,
    users: usize,
    items: usize,
    warm_items: usize,
    cold_items: usize,
    /// Items whose embedding came from the hashed fallback.
    semantic_fallback: usize,
    /// Item ids in dense-index order.
    item_index: Vec<ItemId>,
    user_index: Vec<UserId>,
}

#[derive(Serialize, Deserialize)]
struct CfBody {
    items: usize,
    loss_history: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct AlignBody {
    history: AlignHistory,
}

#[derive(Serialize, Deserialize)]
struct CotBody {
    records: usize,
    retained: usize,
    coverage: f64,
    min_score: f64,
    mean_score: f64,
    max_score: f64,
}

#[derive(Serialize, Deserialize)]
struct ProjectionBody {
    examples_with_cot: usize,
    history: ProjectionHistory,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum Outcome<T> {
    Done(T),
    Unavailable { unavailable: String },
}

#[derive(Serialize, Deserialize)]
struct SweepBody {
    report: SweepReport,
}

/// Runs stages against one output directory.
pub struct Runner {
    config: RunConfig,
    digest: String,
    force: bool,
}

type Catalog = BTreeMap<ItemId, CatalogEntry>;

fn to_json<T: Serialize>(value: &T) -> Vec<u8> {
    let mut s = serde_json::to_string_pretty(value).expect("reports serialise");
    s.push('\n');
    s.into_bytes()
}

impl Runner {
    pub fn new(config: RunConfig, force: bool) -> Result<Self> {
        config.validate()?;
        let digest = config.digest();
        Ok(Self {
            config,
            digest,
            force,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.config.paths.out
    }

    /// Runs `stage` under the directory lock and returns the lines to print.
    pub fn run(&self, stage: Stage) -> Result<Vec<String>> {
        let _lock = Lock::acquire(self.out_dir())?;
        let start = Instant::now();
        let mut lines = match stage {
            Stage::Prepare => self.prepare(),
            Stage::TrainCf => self.train_cf(),
            Stage::TrainAlign => self.train_align(),
            Stage::Cot => self.cot(),
            Stage::TrainProj => self.train_proj(),
            Stage::Eval => self.eval(),
            Stage::Sweep => self.sweep(),
            Stage::Report => self.report(),
        }?;
        lines.push(format!(
            "{} done in {:.1}s",
            stage.name(),
            start.elapsed().as_secs_f64()
        ));
        Ok(lines)
    }

    fn stamp<T: Serialize>(&self, stage: Stage, body: T) -> Vec<u8> {
        to_json(&Stamped {
            stage: stage.name().to_string(),
            seed: self.config.seed,
            config_digest: self.digest.clone(),
            body,
        })
    }

    fn emit(&self, name: &str, bytes: &[u8]) -> Result<()> {
        let path = self.out_dir().join(name);
        match fs::read(&path) {
            Ok(old) if old == bytes => return Ok(()),
            Ok(_) if !self.force => return Err(Error::Overwrite(path)),
            _ => {}
        }
        tsv::write_atomic(&path, bytes)
    }

    /// Path of a prerequisite artifact, or a dependency error naming the
    /// stage that produces it.
    fn need(&self, stage: Stage, name: &str, producer: Stage) -> Result<PathBuf> {
        let path = self.out_dir().join(name);
        if path.is_file() {
            Ok(path)
        } else {
            Err(Error::Dependency {
                stage: stage.name().to_string(),
                prerequisite: format!("{} ({name})", producer.name()),
            })
        }
    }

    fn read_json<T: DeserializeOwned>(
        &self,
        stage: Stage,
        name: &str,
        producer: Stage,
    ) -> Result<T> {
        let path = self.need(stage, name, producer)?;
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Parse {
            path,
            line: e.line(),
            message: e.to_string(),
        })
    }

    fn load_split(&self, stage: Stage) -> Result<SplitDataset> {
        self.read_json(stage, artifact::SPLIT, Stage::Prepare)
    }

    fn load_catalog(&self, stage: Stage) -> Result<Catalog> {
        crate::data::load_catalog(&self.need(stage, artifact::CATALOG, Stage::Prepare)?)
    }

    fn load_semantic(&self, stage: Stage) -> Result<SemanticStore> {
        load_embeddings(&self.need(stage, artifact::SEMANTIC, Stage::Prepare)?)
    }

    fn load_cf(&self, stage: Stage) -> Result<CfModel> {
        CfModel::from_checkpoint(&Checkpoint::load(&self.need(
            stage,
            artifact::CF,
            Stage::TrainCf,
        )?)?)
    }

    fn load_align(&self, stage: Stage) -> Result<AlignmentNetwork> {
        AlignmentNetwork::from_checkpoint(&Checkpoint::load(&self.need(
            stage,
            artifact::ALIGN,
            Stage::TrainAlign,
        )?)?)
    }

    fn load_cots(&self, stage: Stage) -> Result<Vec<CotRecord>> {
        load_cot_records(&self.need(stage, artifact::COTS, Stage::Cot)?)
    }

    fn adapter(&self, catalog: &Catalog) -> Result<GenerationAdapter> {
        let g = &self.config.generation;
        Ok(match g.mode {
            GenerationMode::Fixture => {
                let cots = match &self.config.paths.cot_fixture {
                    Some(p) => load_cot_fixture(p)?
                        .into_iter()
                        .map(|(k, (_, text))| (k, text))
                        .collect(),
                    None => BTreeMap::new(),
                };
                let explanations = match &self.config.paths.explanation_fixture {
                    Some(p) => load_explanation_fixture(p)?,
                    None => BTreeMap::new(),
                };
                GenerationAdapter::Fixture(FixtureAdapter {
                    cots,
                    explanations,
                    synthesize: g.synthesize.then(|| catalog.clone()),
                    good_percent: g.good_percent,
                })
            }
            GenerationMode::Remote => {
                let endpoint = g.endpoint.clone().ok_or_else(|| {
                    Error::config("generation.endpoint", "required in remote mode")
                })?;
                let transport = HttpTransport::new(endpoint, Duration::from_secs(g.timeout_secs));
                GenerationAdapter::Remote(RemoteAdapter::new(Box::new(transport), g.retries))
            }
        })
    }

    fn prepare(&self) -> Result<Vec<String>> {
        let p = &self.config.paths;
        let interactions = p
            .interactions
            .as_ref()
            .ok_or_else(|| Error::config("paths.interactions", "required by prepare"))?;
        let catalog_path = p
            .catalog
            .as_ref()
            .ok_or_else(|| Error::config("paths.catalog", "required by prepare"))?;
        let d = &self.config.data;
        let log = load_interactions(interactions, catalog_path)?;
        let filtered = filter_dataset(&log, d.min_user_events, d.min_item_popularity)?;
        let sequences = build_sequences(&filtered);
        let split = leave_one_out_split(&sequences)?;
        let partition = partition_cold_warm(&filtered, d.cold_warm_fraction)?;
        let kept: BTreeSet<&ItemId> = filtered.items.iter().collect();
        let catalog: Catalog = filtered
            .catalog
            .iter()
            .filter(|(q, _)| kept.contains(q))
            .map(|(q, c)| (q.clone(), c.clone()))
            .collect();
        let mut semantic = match &p.embeddings {
            Some(path) => load_embeddings(path)?,
            None => SemanticStore::default(),
        };
        let filled = semantic.fill_from_catalog(&catalog);

        let mut seq_text = String::new();
        for (u, s) in &sequences {
            let items: Vec<String> = s.items.iter().map(|q| tsv::escape(&q.0)).collect();
            let _ = writeln!(seq_text, "{}\t{}", tsv::escape(&u.0), items.join("\t"));
        }
        self.emit(artifact::SEQUENCES, seq_text.as_bytes())?;
        self.emit(artifact::SPLIT, &to_json(&split))?;
        self.emit(artifact::PARTITION, &to_json(&partition))?;
        self.emit(artifact::CATALOG, render_catalog(&catalog).as_bytes())?;
        self.emit(artifact::SEMANTIC, semantic.render().as_bytes())?;
        let body = PrepareBody {
            events_loaded: log.events.len(),
            events_kept: filtered.events.len(),
            users: filtered.users.len(),
            items: filtered.items.len(),
            warm_items: partition.warm.len(),
            cold_items: partition.cold.len(),
            semantic_fallback: filled.len(),
            item_index: filtered.items.clone(),
            user_index: filtered.users.clone(),
        };
        let lines = vec![
            format!(
                "events    {} loaded, {} kept",
                body.events_loaded, body.events_kept
            ),
            format!("users     {}", body.users),
            format!("items     {}", body.items),
            format!("warm/cold {}/{}", body.warm_items, body.cold_items),
            format!("fallback  {} item embeddings", body.semantic_fallback),
        ];
        self.emit(artifact::PREPARE, &self.stamp(Stage::Prepare, body))?;
        Ok(lines)
    }

    fn train_cf(&self) -> Result<Vec<String>> {
        let split = self.load_split(Stage::TrainCf)?;
        let cf = train_cf_stage(&split, &self.config.cf, self.config.seed)?;
        self.emit(artifact::CF, cf.to_checkpoint().render().as_bytes())?;
        let body = CfBody {
            items: cf.items().len(),
            loss_history: cf.loss_history().to_vec(),
        };
        let line = format!(
            "cf loss {:.4} -> {:.4} over {} epochs",
            body.loss_history.first().copied().unwrap_or(f64::NAN),
            body.loss_history.last().copied().unwrap_or(f64::NAN),
            body.loss_history.len()
        );
        self.emit(artifact::CF_REPORT, &self.stamp(Stage::TrainCf, body))?;
        Ok(vec![line])
    }

    fn train_align(&self) -> Result<Vec<String>> {
        let stage = Stage::TrainAlign;
        let split = self.load_split(stage)?;
        let semantic = self.load_semantic(stage)?;
        let cf = self.load_cf(stage)?;
        let (align, history) =
            train_align_stage(&cf, &split, &semantic, &self.config.align, self.config.seed)?;
        self.emit(artifact::ALIGN, align.to_checkpoint().render().as_bytes())?;
        let last = history.epochs.last().copied().unwrap_or(history.initial);
        let line = format!(
            "align loss {:.4} -> {:.4} (align {:.4}, recon {:.4}, rec {:.4})",
            history.initial.total(),
            last.total(),
            last.align,
            last.reconstruction,
            last.recommendation
        );
        self.emit(
            artifact::ALIGN_REPORT,
            &self.stamp(stage, AlignBody { history }),
        )?;
        Ok(vec![line])
    }

    fn cot(&self) -> Result<Vec<String>> {
        let stage = Stage::Cot;
        let split = self.load_split(stage)?;
        let catalog = self.load_catalog(stage)?;
        let cf = self.load_cf(stage)?;
        let adapter = self.adapter(&catalog)?;
        let c = &self.config.cot;
        let requests = cot_requests(&split, c.sample_size, self.config.seed);
        let records = generate_cots(
            &requests,
            &|h| cf_scores(&cf, h),
            &catalog,
            &adapter,
            &FallbackEmbedder,
            c,
        )?;
        self.emit(artifact::COTS, render_cot_records(&records).as_bytes())?;
        let (retained, coverage) = filter_cots(&records, c.threshold)?;
        let scores: Vec<f64> = records.iter().map(|r| r.score).collect();
        let body = CotBody {
            records: records.len(),
            retained: retained.len(),
            coverage,
            min_score: scores.iter().copied().fold(f64::INFINITY, f64::min),
            mean_score: scores.iter().sum::<f64>() / scores.len() as f64,
            max_score: scores.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        };
        let line = format!(
            "cot {} of {} retained at {} (coverage {:.3})",
            body.retained, body.records, c.threshold, body.coverage
        );
        self.emit(artifact::COT_REPORT, &self.stamp(stage, body))?;
        Ok(vec![line])
    }

    fn train_proj(&self) -> Result<Vec<String>> {
        let stage = Stage::TrainProj;
        let split = self.load_split(stage)?;
        let catalog = self.load_catalog(stage)?;
        let semantic = self.load_semantic(stage)?;
        let cf = self.load_cf(stage)?;
        let align = self.load_align(stage)?;
        let records = self.load_cots(stage)?;
        let signals = cot_signals(&records, self.config.cot.threshold, &FallbackEmbedder);
        let (stack, head, history) = train_proj_stage(
            &cf,
            &align,
            &semantic,
            &catalog,
            &split,
            &signals,
            &self.config.projection,
            self.config.seed,
        )?;
        self.emit(
            artifact::PROJECTION,
            stack.to_checkpoint(&head).render().as_bytes(),
        )?;
        let line = format!(
            "projection loss {:.4} -> {:.4} over {} epochs",
            history.initial,
            history.epochs.last().copied().unwrap_or(history.initial),
            history.epochs.len()
        );
        let body = ProjectionBody {
            examples_with_cot: signals.len(),
            history,
        };
        self.emit(artifact::PROJECTION_REPORT, &self.stamp(stage, body))?;
        Ok(vec![line])
    }

    fn pipeline(&self, stage: Stage) -> Result<(Pipeline, SplitDataset, Catalog)> {
        let split = self.load_split(stage)?;
        let catalog = self.load_catalog(stage)?;
        let semantic = self.load_semantic(stage)?;
        let cf = self.load_cf(stage)?;
        let align = self.load_align(stage)?;
        let records = self.load_cots(stage)?;
        let ck = Checkpoint::load(&self.need(stage, artifact::PROJECTION, Stage::TrainProj)?)?;
        let (stack, head) = ProjectionStack::from_checkpoint(&ck)?;
        let signals = cot_signals(&records, self.config.cot.threshold, &FallbackEmbedder);
        let pipeline = Pipeline::new(cf, align, semantic, &catalog, stack, head, signals)?;
        Ok((pipeline, split, catalog))
    }

    fn references(&self) -> Result<Option<BTreeMap<(UserId, ItemId), String>>> {
        match &self.config.paths.reviews {
            Some(p) if self.config.eval.explanations => Ok(Some(load_user_item_texts(p)?)),
            _ => Ok(None),
        }
    }

    fn eval(&self) -> Result<Vec<String>> {
        let stage = Stage::Eval;
        let (pipeline, split, catalog) = self.pipeline(stage)?;
        let partition: ColdWarmPartition =
            self.read_json(stage, artifact::PARTITION, Stage::Prepare)?;
        let setup = self.config.eval_setup();
        let universe: Vec<ItemId> = catalog.keys().cloned().collect();
        let references = self.references()?;
        let adapter = match references {
            Some(_) => Some(self.adapter(&catalog)?),
            None => None,
        };
        let ranker = pipeline.ranker()?;
        let explainer = adapter.as_ref().map(|adapter| PipelineExplainer {
            ranker: &ranker,
            adapter,
        });
        let report = evaluate_split(
            &ranker,
            explainer.as_ref().map(|e| e as &dyn Explainer),
            references.as_ref(),
            &split,
            &universe,
            &setup,
        )?;
        self.emit(artifact::EVAL, report.to_json().as_bytes())?;
        let mut lines: Vec<String> = report.table().lines().map(str::to_string).collect();

        let cold_warm = match cold_warm_report(&ranker, &split, &partition, &universe, &setup) {
            Ok(r) => {
                lines.push(format!(
                    "cold/warm HR@{k} {:.4}/{:.4}",
                    r.cold.hr.values().last().copied().unwrap_or(0.0),
                    r.warm.hr.values().last().copied().unwrap_or(0.0),
                    k = setup.ks.iter().max().copied().unwrap_or(0)
                ));
                Outcome::Done(r)
            }
            Err(e @ Error::EmptyCohort(_)) => {
                lines.push(format!("cold/warm unavailable: {e}"));
                Outcome::Unavailable {
                    unavailable: e.to_string(),
                }
            }
            Err(e) => return Err(e),
        };
        self.emit(artifact::COLD_WARM, &self.stamp(stage, cold_warm))?;

        if let Some(z) = &self.config.zero_shot {
            let zs = self.zero_shot(&pipeline, z, &setup)?;
            lines.push(format!(
                "zero-shot semantic share {:.3}, HR@{k} {:.4}",
                zs.semantic_share,
                zs.report.hr.values().last().copied().unwrap_or(0.0),
                k = setup.ks.iter().max().copied().unwrap_or(0)
            ));
            self.emit(artifact::ZERO_SHOT, &self.stamp(stage, zs))?;
        }
        Ok(lines)
    }

    fn zero_shot(
        &self,
        source: &Pipeline,
        z: &ZeroShotConfig,
        setup: &EvalSetup,
    ) -> Result<crate::eval::ZeroShotReport> {
        let d = &self.config.data;
        let log = load_interactions(&z.interactions, &z.catalog)?;
        let filtered = filter_dataset(&log, d.min_user_events, d.min_item_popularity)?;
        let split = leave_one_out_split(&build_sequences(&filtered))?;
        let kept: BTreeSet<&ItemId> = filtered.items.iter().collect();
        let catalog: Catalog = filtered
            .catalog
            .iter()
            .filter(|(q, _)| kept.contains(q))
            .map(|(q, c)| (q.clone(), c.clone()))
            .collect();
        let mut semantic = match &z.embeddings {
            Some(p) => load_embeddings(p)?,
            None => SemanticStore::default(),
        };
        semantic.fill_from_catalog(&catalog);
        // reasoning texts for the new domain use the transferred item scores
        // as the prior
        let bare = source.transfer(&catalog, semantic.clone(), BTreeMap::new())?;
        let adapter = self.adapter(&catalog)?;
        let requests = cot_requests(&split, self.config.cot.sample_size, self.config.seed);
        let records = generate_cots(
            &requests,
            &|h| bare.item_scores(h),
            &catalog,
            &adapter,
            &FallbackEmbedder,
            &self.config.cot,
        )?;
        let signals = cot_signals(&records, self.config.cot.threshold, &FallbackEmbedder);
        zero_shot_eval(source, &catalog, semantic, &split, signals, setup)
    }

    fn sweep(&self) -> Result<Vec<String>> {
        let stage = Stage::Sweep;
        let records = self.load_cots(stage)?;
        let thresholds = &self.config.sweep.thresholds;
        let report = if self.config.sweep.downstream {
            let split = self.load_split(stage)?;
            let catalog = self.load_catalog(stage)?;
            let semantic = self.load_semantic(stage)?;
            let cf = self.load_cf(stage)?;
            let align = self.load_align(stage)?;
            let references = self.references()?;
            let adapter = match references {
                Some(_) => Some(self.adapter(&catalog)?),
                None => None,
            };
            let universe: Vec<ItemId> = catalog.keys().cloned().collect();
            let mut setup = self.config.eval_setup();
            setup.ks = vec![1];
            let downstream = |kept: &[CotRecord]| -> Result<(f64, Option<f64>)> {
                let signals = cot_signals(kept, 0.0, &FallbackEmbedder);
                let (stack, head, _) = train_proj_stage(
                    &cf,
                    &align,
                    &semantic,
                    &catalog,
                    &split,
                    &signals,
                    &self.config.projection,
                    self.config.seed,
                )?;
                let pipeline = Pipeline::new(
                    cf.clone(),
                    align.clone(),
                    semantic.clone(),
                    &catalog,
                    stack,
                    head,
                    signals,
                )?;
                let ranker = pipeline.ranker()?;
                let explainer = adapter.as_ref().map(|adapter| PipelineExplainer {
                    ranker: &ranker,
                    adapter,
                });
                let r: MetricReport = evaluate_split(
                    &ranker,
                    explainer.as_ref().map(|e| e as &dyn Explainer),
                    references.as_ref(),
                    &split,
                    &universe,
                    &setup,
                )?;
                Ok((r.hr[&1], r.rouge_l))
            };
            threshold_sweep(&records, thresholds, Some(&downstream))?
        } else {
            threshold_sweep(&records, thresholds, None)?
        };
        let rendered = report.render();
        self.emit(artifact::SWEEP, rendered.as_bytes())?;
        self.emit(
            artifact::SWEEP_REPORT,
            &self.stamp(stage, SweepBody { report }),
        )?;
        Ok(rendered.lines().map(str::to_string).collect())
    }

    fn report(&self) -> Result<Vec<String>> {
        let stage = Stage::Report;
        self.need(stage, artifact::PREPARE, Stage::Prepare)?;
        let sources = [
            ("prepare", artifact::PREPARE),
            ("train-cf", artifact::CF_REPORT),
            ("train-align", artifact::ALIGN_REPORT),
            ("cot", artifact::COT_REPORT),
            ("train-proj", artifact::PROJECTION_REPORT),
            ("eval", artifact::EVAL),
            ("cold-warm", artifact::COLD_WARM),
            ("zero-shot", artifact::ZERO_SHOT),
            ("sweep", artifact::SWEEP_REPORT),
        ];
        let mut stages = serde_json::Map::new();
        let mut missing = Vec::new();
        let mut stale = Vec::new();
        for (name, file) in sources {
            let path = self.out_dir().join(file);
            if !path.is_file() {
                missing.push(name.to_string());
                continue;
            }
            let value: serde_json::Value = self.read_json(stage, file, Stage::Prepare)?;
            if value.get("config_digest").and_then(|d| d.as_str()) != Some(self.digest.as_str()) {
                stale.push(name.to_string());
            }
            stages.insert(name.to_string(), value);
        }
        let mut lines = Vec::new();
        if let Some(eval) = stages.get("eval") {
            let r: MetricReport =
                serde_json::from_value(eval.clone()).map_err(|e| Error::Parse {
                    path: self.out_dir().join(artifact::EVAL),
                    line: 0,
                    message: e.to_string(),
                })?;
            lines.extend(r.table().lines().map(str::to_string));
        }
        if !missing.is_empty() {
            lines.push(format!("not yet run: {}", missing.join(", ")));
        }
        if !stale.is_empty() {
            lines.push(format!(
                "produced under another config: {}",
                stale.join(", ")
            ));
        }
        let body = serde_json::json!({
            "stages": stages,
            "missing": missing,
            "stale": stale,
        });
        self.emit(artifact::REPORT, &self.stamp(stage, body))?;
        Ok(lines)
    }
}
